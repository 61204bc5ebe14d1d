"""Density filtering, top-k routing and probability-weighted expert combination."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .experts import ExpertBank
from .gate import Gate, gate_for
from .grid import VoxelGrid, softplus
from .render import FieldOutput

DEFAULT_THRESHOLD = 1e-3


class DensityFilter:
    """Frozen coarse density volume; a point survives when softplus(V_D(x)) >= T."""

    def __init__(self, grid: VoxelGrid, threshold: float = DEFAULT_THRESHOLD):
        if grid.channels != 1:
            raise ValueError("density filter grid must have one channel")
        if threshold < 0:
            raise ValueError("threshold must be >= 0")
        self.grid = grid.copy(requires_grad=False)
        self.threshold = float(threshold)

    @classmethod
    def from_expert(cls, expert, threshold: float = DEFAULT_THRESHOLD) -> "DensityFilter":
        return cls(expert.density, threshold)

    def density(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] == 0:
            return np.zeros(0)
        return softplus(self.grid.sample(pts)[:, 0])

    def keep(self, points) -> np.ndarray:
        return self.density(points) >= self.threshold

    def flops_per_point(self) -> int:
        return 24


def filter_points(points, density_filter: DensityFilter | None):
    """Kept points (input order preserved) and the boolean keep mask."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if density_filter is None:
        mask = np.ones(pts.shape[0], dtype=bool)
    else:
        mask = density_filter.keep(pts)
    return pts[mask], mask


@dataclass
class RoutingDecision:
    indices: np.ndarray
    probs: np.ndarray


def topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Row-wise indices of the k largest entries, ties going to the lower index.

    Rows are ordered by decreasing probability.
    """
    p = np.asarray(probs)
    if p.ndim == 1:
        return topk_indices(p[None, :], k)[0]
    m = p.shape[1]
    if not 1 <= k <= m:
        raise ValueError(f"k must be in [1, {m}], got {k}")
    # stable sort on the negated values keeps equal entries in index order
    return np.argsort(-p, axis=1, kind="stable")[:, :k]


def route(probs, k: int) -> RoutingDecision:
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    idx = topk_indices(p, k)
    return RoutingDecision(indices=idx, probs=np.take_along_axis(p, idx, axis=-1))


@dataclass
class CombinedSample:
    sigma: float
    color: np.ndarray


def combine(x_f, d, bank: ExpertBank, decision: RoutingDecision) -> CombinedSample:
    """Weighted sum of the selected experts only, for a single point."""
    x = np.asarray(x_f, dtype=np.float64).reshape(1, 3)
    dd = np.asarray(d, dtype=np.float64).reshape(1, 3)
    sigma, color = 0.0, np.zeros(3)
    for i, p in zip(decision.indices, decision.probs):
        s, c = bank[int(i)].query(x, dd)
        sigma = sigma + s.data[0, 0] * p
        color = color + c.data[0] * p
    return CombinedSample(float(sigma), color)


@dataclass
class RoutingInfo:
    """Per-batch routing record: the filtered points and where they went."""

    keep: np.ndarray  # (P_all,) bool
    probs: Tensor | None  # (P_f, M) gate probabilities of the kept points
    topk: np.ndarray  # (P_f, k) selected expert ids
    counts: np.ndarray  # (M,) dispatch counts

    @property
    def n_points(self) -> int:
        return int(self.topk.shape[0])


class MixtureOfExperts:
    """Sparse MoE radiance field: filter, gate, top-k dispatch, weighted sum.

    Calling the object with (points, dirs) returns a :class:`FieldOutput` whose
    ``extra["routing"]`` holds the :class:`RoutingInfo` for the auxiliary loss.
    Filtered-out points come back with zero density and colour.
    """

    def __init__(self, bank: ExpertBank, gate: Gate, density_filter: DensityFilter | None = None,
                 k: int = 2):
        if gate.n_experts != bank.M:
            raise ValueError(f"gate routes to {gate.n_experts} experts but the bank has {bank.M}")
        if not 1 <= k <= bank.M:
            raise ValueError(f"k must be in [1, {bank.M}], got {k}")
        self.bank = bank
        self.gate = gate
        self.density_filter = density_filter
        self.k = k

    @property
    def M(self) -> int:
        return self.bank.M

    def parameters(self) -> list[Tensor]:
        return self.bank.parameters() + self.gate.parameters()

    def __call__(self, points, dirs, only_expert: int | None = None) -> FieldOutput:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        dd = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        n_all = pts.shape[0]
        dtype = self.bank[0].dtype
        x_f, keep = filter_points(pts, self.density_filter)
        d_f = dd[keep]
        n_f = x_f.shape[0]
        if n_f == 0:
            info = RoutingInfo(keep, None, np.zeros((0, self.k), dtype=np.intp), np.zeros(self.M, dtype=np.int64))
            return FieldOutput(Tensor(np.zeros((n_all, 1), dtype=dtype)),
                               Tensor(np.zeros((n_all, 3), dtype=dtype)), {"routing": info})
        probs = self.gate.probs(x_f)
        sigma, color, topk = dispatch(self.bank, x_f, d_f, probs, self.k, only_expert)
        counts = np.bincount(topk.reshape(-1), minlength=self.M)
        if n_f != n_all:
            keep_idx = np.nonzero(keep)[0]
            sigma = ad.scatter_rows(sigma, keep_idx, n_all)
            color = ad.scatter_rows(color, keep_idx, n_all)
        info = RoutingInfo(keep, probs, topk, counts)
        return FieldOutput(sigma, color, {"routing": info})


def dispatch(bank: ExpertBank, x_f: np.ndarray, d_f: np.ndarray, probs: Tensor, k: int,
             only_expert: int | None = None) -> tuple[Tensor, Tensor, np.ndarray]:
    """Evaluate each expert on the points routed to it and blend by gate probability.

    Slot ``s`` of a point holds its s-th ranked expert; the blend accumulates
    slots in rank order. Experts receive only their own points, so each kept
    point costs exactly ``k`` expert evaluations.
    """
    n_f = x_f.shape[0]
    topk = topk_indices(probs.data, k)
    topk_p = ad.take_along_rows(probs, topk)
    row_of = np.zeros((n_f, k), dtype=np.intp)
    sig_parts, col_parts = [], []
    offset = 0
    for j in range(bank.M):
        if only_expert is not None and j != only_expert:
            continue
        rows, slots = np.nonzero(topk == j)
        if rows.size == 0:
            continue
        s_j, c_j = bank[j].query(x_f[rows], d_f[rows])
        sig_parts.append(s_j)
        col_parts.append(c_j)
        row_of[rows, slots] = offset + np.arange(rows.size)
        offset += rows.size
    dtype = bank[0].dtype
    if not sig_parts:
        return (Tensor(np.zeros((n_f, 1), dtype=dtype)), Tensor(np.zeros((n_f, 3), dtype=dtype)), topk)
    y_sig = ad.concat(sig_parts, axis=0) if len(sig_parts) > 1 else sig_parts[0]
    y_col = ad.concat(col_parts, axis=0) if len(col_parts) > 1 else col_parts[0]
    sigma = color = None
    for s in range(k):
        p_s = ad.reshape(ad.take_along_rows(topk_p, np.full((n_f, 1), s)), (n_f,))
        if only_expert is not None:
            sel = np.nonzero(topk[:, s] == only_expert)[0]
            if sel.size == 0:
                continue
            # points whose slot s went elsewhere get zero weight
            mask = np.zeros(n_f, dtype=dtype)
            mask[sel] = 1.0
            p_s = ad.mul(p_s, mask)
        term_s = ad.gather_scale(y_sig, row_of[:, s], p_s)
        term_c = ad.gather_scale(y_col, row_of[:, s], p_s)
        sigma = term_s if sigma is None else ad.add(sigma, term_s)
        color = term_c if color is None else ad.add(color, term_c)
    if sigma is None:
        return (Tensor(np.zeros((n_f, 1), dtype=dtype)), Tensor(np.zeros((n_f, 3), dtype=dtype)), topk)
    return sigma, color, topk


def ensemble_moe(moe: MixtureOfExperts) -> MixtureOfExperts:
    """Same experts and filter, every expert selected, frozen uniform gate.

    A freshly built gate has a zero last layer, so its probabilities are
    exactly 1/M everywhere.
    """
    gate = gate_for(moe.M, moe.gate.grid.resolution[0], dtype=moe.bank[0].dtype)
    for p in gate.parameters():
        p.requires_grad = False
    return MixtureOfExperts(moe.bank, gate, moe.density_filter, moe.M)
