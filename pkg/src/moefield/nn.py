"""Small fully connected networks on top of the autodiff tensors."""
from __future__ import annotations

import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MLP_MAGIC = b"MLP1"


class MLP:
    """Linear layers with ReLU between them (no activation on the output)."""

    def __init__(self, weights: list[Tensor], biases: list[Tensor]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        for w, b in zip(weights, biases):
            if w.data.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"bad layer shapes {w.shape}, {b.shape}")
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator, dtype=np.float64,
             zero_last: bool = False) -> "MLP":
        """Weights uniform in +-1/sqrt(fan_in), zero biases."""
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
            if zero_last and i == len(sizes) - 2:
                w[:] = 0.0
            weights.append(Tensor(w, requires_grad=True))
            biases.append(Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True))
        return cls(weights, biases)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, x) -> Tensor:
        h = ad.as_tensor(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if i < last:
                h = ad.relu(h)
        return h

    def flops_per_point(self) -> int:
        """Multiply-adds counted as 2 flops; bias adds ignored."""
        s = self.sizes
        return sum(2 * a * b for a, b in zip(s[:-1], s[1:]))

    def copy(self) -> "MLP":
        return MLP(
            [Tensor(w.data.copy(), requires_grad=w.requires_grad) for w in self.weights],
            [Tensor(b.data.copy(), requires_grad=b.requires_grad) for b in self.biases],
        )

    def to_bytes(self) -> bytes:
        parts = [MLP_MAGIC, struct.pack("<I", len(self.weights))]
        for w, b in zip(self.weights, self.biases):
            dt = np.dtype(w.dtype).newbyteorder("<")
            code = 0 if dt.itemsize == 4 else 1
            parts.append(struct.pack("<3I", w.shape[0], w.shape[1], code))
            parts.append(np.ascontiguousarray(w.data, dtype=dt).tobytes())
            parts.append(np.ascontiguousarray(b.data, dtype=dt).tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes, offset: int = 0) -> tuple["MLP", int]:
        if blob[offset:offset + 4] != MLP_MAGIC:
            raise ValueError("not an MLP blob (bad magic)")
        (n_layers,) = struct.unpack_from("<I", blob, offset + 4)
        pos = offset + 8
        weights, biases = [], []
        for _ in range(n_layers):
            fan_in, fan_out, code = struct.unpack_from("<3I", blob, pos)
            pos += 12
            dt = np.dtype("<f4") if code == 0 else np.dtype("<f8")
            nw = fan_in * fan_out
            w = np.frombuffer(blob, dtype=dt, count=nw, offset=pos).reshape(fan_in, fan_out)
            pos += nw * dt.itemsize
            b = np.frombuffer(blob, dtype=dt, count=fan_out, offset=pos)
            pos += fan_out * dt.itemsize
            native = dt.newbyteorder("=")
            weights.append(Tensor(w.astype(native), requires_grad=True))
            biases.append(Tensor(b.astype(native), requires_grad=True))
        return cls(weights, biases), pos
