"""Define-by-run reverse-mode differentiation over numpy arrays.

Every operation returns a :class:`Tensor`. When any input requires a
gradient the result keeps references to its parents plus a closure that maps
the output gradient to parent gradients. :func:`backward` linearises that
graph into a :class:`Tape` (parents always precede children) and walks it in
reverse, visiting each node once.

The op set is deliberately small: it covers the grid interpolation, MLPs,
softmax gating, top-k dispatch, volume compositing and the losses.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "no_grad",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "softplus",
    "sigmoid",
    "exp",
    "square",
    "sum",
    "mean",
    "softmax_rows",
    "reshape",
    "concat",
    "cumsum_exclusive",
    "take_rows",
    "take_along_rows",
    "scatter_rows",
    "gather_scale",
    "sparse_matmul",
    "forward_op",
]

_builtin_sum = sum


class Tensor:
    """Dense float array with an optional gradient record."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording parents or backward closures."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad():
    """Record gradients again, e.g. for a gradient pass nested in ``no_grad``."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _record(out_data, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(out_data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars take the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.ndim(b) == 0:
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor) and np.ndim(a) == 0:
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), bw, "mul")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _record(out, (a,), lambda g: (g * (out > 0),), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(np.logaddexp(0.0, ad).astype(ad.dtype, copy=False), (a,),
                   lambda g: (g * _sigmoid(ad),), "softplus")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _record(e, (a,), lambda g: (g * e,), "exp")


# ----------------------------------------------------------------------------
# reductions and shape


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.asarray(out), (a,), bw, "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    shape = a.shape
    if n == 0:
        raise ValueError("mean: empty tensor")
    return _record(np.asarray(a.data.mean()), (a,),
                   lambda g: (np.full(shape, g / n, dtype=a.dtype),), "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: no inputs")
    ndim = ts[0].data.ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.data.ndim != ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _record(out, ts, lambda g: tuple(np.split(g, sizes, axis=ax)), "concat")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def softmax_rows(a) -> Tensor:
    """Softmax over the last axis, one distribution per row."""
    a = as_tensor(a)
    if a.data.ndim not in (1, 2):
        raise ValueError(f"softmax_rows: expected 1-D or 2-D input, got {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record(s, (a,), bw, "softmax_rows")


def cumsum_exclusive(a, axis: int = -1) -> Tensor:
    """out[i] = sum_{j<i} a[j] along ``axis``; out[0] = 0."""
    a = as_tensor(a)
    ad = a.data
    c = np.cumsum(ad, axis=axis)
    out = c - ad

    def bw(g):
        # reverse cumulative sum, also exclusive
        rc = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rc - g,)

    return _record(out, (a,), bw, "cumsum_exclusive")


# ----------------------------------------------------------------------------
# indexing and dispatch


def _scatter_add(g: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + g.shape[1:], dtype=g.dtype)
    np.add.at(out, index, g)
    return out


def take_rows(a, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1:
        raise ValueError("take_rows: index must be 1-D")
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range for {a.shape[0]} rows")
    n = a.shape[0]
    return _record(a.data[index], (a,), lambda g: (_scatter_add(g, index, n),), "take_rows")


def take_along_rows(a, index) -> Tensor:
    """out[r, j] = a[r, index[r, j]] for a 2-D ``a``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if a.data.ndim != 2 or index.ndim != 2 or index.shape[0] != a.shape[0]:
        raise ValueError(f"take_along_rows: shapes {a.shape} and {index.shape} do not conform")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        rows = np.repeat(np.arange(shape[0]), index.shape[1])
        np.add.at(out, (rows, index.reshape(-1)), g.reshape(-1))
        return (out,)

    return _record(np.take_along_axis(a.data, index, axis=1), (a,), bw, "take_along_rows")


def scatter_rows(a, index, n: int) -> Tensor:
    """Place row ``r`` of ``a`` at row ``index[r]`` of an ``n``-row zero array."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1 or index.shape[0] != a.shape[0]:
        raise ValueError(f"scatter_rows: {index.shape[0] if index.ndim else 0} indices for {a.shape[0]} rows")
    out = np.zeros((n,) + a.shape[1:], dtype=a.dtype)
    np.add.at(out, index, a.data)
    return _record(out, (a,), lambda g: (g[index],), "scatter_rows")


def gather_scale(src, index, scale) -> Tensor:
    """Select rows of ``src`` by ``index`` and multiply row ``r`` by ``scale[r]``.

    This is the top-k dispatch primitive: the backward pass scatters the
    gradient into the selected source rows and into the per-row scalars.
    """
    src, scale = as_tensor(src), as_tensor(scale)
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1 or scale.data.ndim != 1 or scale.shape[0] != index.shape[0]:
        raise ValueError(
            f"gather_scale: index {index.shape} and scale {scale.shape} must be equal-length 1-D"
        )
    if index.size and (index.min() < 0 or index.max() >= src.shape[0]):
        raise IndexError(f"gather_scale: index out of range for {src.shape[0]} rows")
    rows = src.data[index]
    s = scale.data.reshape((-1,) + (1,) * (src.data.ndim - 1))
    n = src.shape[0]

    def bw(g):
        g_src = _scatter_add(g * s, index, n)
        g_scale = (g * rows).reshape(g.shape[0], -1).sum(axis=1)
        return g_src, g_scale

    return _record(rows * s, (src, scale), bw, "gather_scale")


def sparse_matmul(weights: sp.spmatrix, a) -> Tensor:
    """Constant sparse matrix times a dense tensor (used for interpolation)."""
    a = as_tensor(a)
    if weights.shape[1] != a.shape[0]:
        raise ValueError(f"sparse_matmul: {weights.shape} and {a.shape} are not aligned")
    out = np.asarray(weights @ a.data)
    return _record(out, (a,), lambda g: (np.asarray(weights.T @ g),), "sparse_matmul")


_FORWARD = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "exp": exp,
    "softmax_rows": softmax_rows,
    "sum": sum,
    "mean": mean,
    "square": square,
    "gather_scale": gather_scale,
    "cumsum_exclusive": cumsum_exclusive,
}


def forward_op(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name."""
    try:
        fn = _FORWARD[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}; known: {sorted(_FORWARD)}") from None
    return fn(*inputs, **kwargs)


# ----------------------------------------------------------------------------
# backward


class Tape:
    """Topologically ordered record of the graph reachable from a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes
        pos = {id(n): i for i, n in enumerate(nodes)}
        self.parents: list[tuple[int, ...]] = [
            tuple(pos[id(p)] for p in n._parents if p.requires_grad) for n in nodes
        ]

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor, wrt: Iterable[Tensor] | None = None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    When ``wrt`` is given, return the list of their gradients; leaves that do
    not influence ``root`` get zeros.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    if root.requires_grad:
        tape = Tape.trace(root)
        grads[id(root)] = np.ones_like(root.data)
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
    if wrt is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]
