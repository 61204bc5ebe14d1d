"""Trainable probability field over experts: feature grid, shallow MLP, softmax."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import VoxelGrid, grid_from_bytes
from .nn import MLP

GATE_MAGIC = b"MFGT"
DEFAULT_GATE_RESOLUTION = 16
DEFAULT_GATE_CHANNELS = 8
GATE_HIDDEN = 64


class Gate:
    def __init__(self, grid: VoxelGrid, mlp: MLP):
        if mlp.sizes[0] != grid.channels:
            raise ValueError(f"gate MLP expects {mlp.sizes[0]} inputs, grid has {grid.channels} channels")
        self.grid = grid
        self.mlp = mlp

    @property
    def n_experts(self) -> int:
        return self.mlp.sizes[-1]

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.grid.resolution

    def parameters(self) -> list[Tensor]:
        return [self.grid.values] + self.mlp.parameters()

    def grid_parameters(self) -> list[Tensor]:
        return [self.grid.values]

    def mlp_parameters(self) -> list[Tensor]:
        return self.mlp.parameters()

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def logits(self, points) -> Tensor:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return self.mlp(self.grid.interpolate(pts))

    def probs(self, points) -> Tensor:
        """Per-point distribution over experts, shape (P, M)."""
        return ad.softmax_rows(self.logits(points))

    def flops_per_point(self) -> int:
        return 24 * self.grid.channels + self.mlp.flops_per_point()

    def copy(self) -> "Gate":
        return Gate(self.grid.copy(), self.mlp.copy())

    def to_bytes(self) -> bytes:
        return GATE_MAGIC + self.grid.to_bytes() + self.mlp.to_bytes()

    @classmethod
    def from_bytes(cls, blob: bytes, offset: int = 0) -> "Gate":
        if blob[offset:offset + 4] != GATE_MAGIC:
            raise ValueError("not a gate blob (bad magic)")
        values, pos = grid_from_bytes(blob, offset + 4)
        mlp, _ = MLP.from_bytes(blob, pos)
        return cls(VoxelGrid(values), mlp)


def gate_probs(gate: Gate, x_f) -> Tensor:
    """Gate distribution for one point (shape (M,)) or a batch (shape (P, M))."""
    x = np.asarray(x_f, dtype=np.float64)
    p = gate.probs(x)
    return ad.reshape(p, (gate.n_experts,)) if x.ndim == 1 else p


def gate_for(bank_or_m, gate_resolution: int = DEFAULT_GATE_RESOLUTION,
             channels: int = DEFAULT_GATE_CHANNELS, seed: int = 0, dtype=None) -> Gate:
    """Fresh gate sized for a bank; the output layer starts at zero so the gate is uniform."""
    if gate_resolution < 4:
        raise ValueError(f"gate_resolution must be >= 4, got {gate_resolution}")
    if isinstance(bank_or_m, int):
        M, dt = bank_or_m, dtype or np.float64
    else:
        M = bank_or_m.M
        dt = dtype or bank_or_m[0].dtype
    rng = np.random.default_rng(seed)
    g = gate_resolution
    grid = VoxelGrid(rng.uniform(-1.0, 1.0, size=(g, g, g, channels)).astype(dt))
    mlp = MLP.init([channels, GATE_HIDDEN, GATE_HIDDEN, M], rng, dtype=dt, zero_last=True)
    return Gate(grid, mlp)
