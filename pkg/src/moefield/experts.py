"""Dense-grid radiance-field experts at geometrically increasing resolutions."""
from __future__ import annotations

import itertools
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import VoxelGrid, grid_from_bytes, interpolation_matrix
from .nn import MLP

EXPERT_MAGIC = b"MFE1"
DEFAULT_FEATURES = 6
DEFAULT_HIDDEN = 32
DIR_ENC_DIM = 12
INIT_RAW_DENSITY = -1.0


def direction_encoding(dirs: np.ndarray) -> np.ndarray:
    """sin/cos of each direction component at frequencies 1 and 2 -> (P, 12)."""
    d = np.asarray(dirs).reshape(-1, 3)
    s, c = np.sin(d), np.cos(d)
    # frequency 2 via the double-angle identities
    return np.concatenate([s, c, 2.0 * s * c, 1.0 - 2.0 * s * s], axis=1)


def check_unit(dirs: np.ndarray, tol: float = 1e-6) -> None:
    norms = np.linalg.norm(np.asarray(dirs).reshape(-1, 3), axis=1)
    if norms.size and np.max(np.abs(norms - 1.0)) > tol:
        raise ValueError(f"directions must be unit length (max |norm - 1| = {np.max(np.abs(norms - 1.0)):.3g})")


class Expert:
    """One radiance field: density grid, feature grid and a colour MLP.

    ``calls`` counts how many points have been evaluated; the MoE relies on
    it to check that unselected experts are never queried.
    """

    def __init__(self, index: int, density: VoxelGrid, features: VoxelGrid, color_mlp: MLP):
        if density.channels != 1:
            raise ValueError("density grid must have one channel")
        if density.resolution != features.resolution:
            raise ValueError("density and feature grids must share a resolution")
        if color_mlp.sizes[0] != features.channels + DIR_ENC_DIM or color_mlp.sizes[-1] != 3:
            raise ValueError(f"colour MLP sizes {color_mlp.sizes} do not fit the feature grid")
        self.index = index
        self.density = density
        self.features = features
        self.color_mlp = color_mlp
        self.calls = 0

    @classmethod
    def init(cls, index: int, resolution, rng: np.random.Generator, n_features: int = DEFAULT_FEATURES,
             hidden: int = DEFAULT_HIDDEN, dtype=np.float64) -> "Expert":
        res = tuple(int(r) for r in resolution)
        density = VoxelGrid(np.full(res + (1,), INIT_RAW_DENSITY, dtype=dtype))
        bound = 1.0 / np.sqrt(n_features)
        features = VoxelGrid(rng.uniform(-bound, bound, size=res + (n_features,)).astype(dtype))
        mlp = MLP.init([n_features + DIR_ENC_DIM, hidden, 3], rng, dtype=dtype)
        return cls(index, density, features, mlp)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.density.resolution

    @property
    def dtype(self):
        return self.density.values.dtype

    def parameters(self) -> list[Tensor]:
        return [self.density.values, self.features.values] + self.color_mlp.parameters()

    def grid_parameters(self) -> list[Tensor]:
        return [self.density.values, self.features.values]

    def mlp_parameters(self) -> list[Tensor]:
        return self.color_mlp.parameters()

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def query(self, points, dirs) -> tuple[Tensor, Tensor]:
        """Density (P, 1) >= 0 and colour (P, 3) in (0, 1) at each point."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        if d.shape[0] != pts.shape[0]:
            raise ValueError(f"{pts.shape[0]} points but {d.shape[0]} directions")
        check_unit(d)
        self.calls += pts.shape[0]
        weights = interpolation_matrix(pts, self.resolution, self.dtype)
        sigma = ad.softplus(self.density.interpolate(pts, weights))
        feat = self.features.interpolate(pts, weights)
        enc = Tensor(direction_encoding(d).astype(self.dtype))
        color = ad.sigmoid(self.color_mlp(ad.concat([feat, enc], axis=1)))
        return sigma, color

    def flops_per_point(self) -> int:
        """8-corner interpolation at 24 flops per channel plus the colour MLP."""
        return 24 * (1 + self.features.channels) + self.color_mlp.flops_per_point()

    def copy(self) -> "Expert":
        return Expert(self.index, self.density.copy(), self.features.copy(), self.color_mlp.copy())

    def to_bytes(self, n_experts: int) -> bytes:
        header = EXPERT_MAGIC + struct.pack("<5I", self.index, n_experts, *self.resolution)
        return header + self.density.to_bytes() + self.features.to_bytes() + self.color_mlp.to_bytes()

    @classmethod
    def from_bytes(cls, blob: bytes, offset: int = 0) -> tuple["Expert", int, int]:
        """Returns (expert, n_experts recorded in the header, end offset)."""
        if blob[offset:offset + 4] != EXPERT_MAGIC:
            raise ValueError("not an expert blob (bad magic)")
        index, n_experts, *res = struct.unpack_from("<5I", blob, offset + 4)
        pos = offset + 24
        dens, pos = grid_from_bytes(blob, pos)
        feats, pos = grid_from_bytes(blob, pos)
        mlp, pos = MLP.from_bytes(blob, pos)
        if tuple(res) != dens.shape[:3]:
            raise ValueError("expert manifest resolution does not match its grids")
        return cls(index, VoxelGrid(dens), VoxelGrid(feats), mlp), n_experts, pos


class ExpertBank:
    """Experts ordered by strictly increasing parameter count."""

    def __init__(self, experts: list[Expert]):
        if len(experts) < 1:
            raise ValueError("empty expert bank")
        counts = [e.param_count for e in experts]
        if any(b <= a for a, b in zip(counts, counts[1:])):
            raise ValueError(f"experts must have strictly increasing parameter counts, got {counts}")
        self.experts = experts

    def __len__(self) -> int:
        return len(self.experts)

    def __getitem__(self, i: int) -> Expert:
        return self.experts[i]

    def __iter__(self):
        return iter(self.experts)

    @property
    def M(self) -> int:
        return len(self.experts)

    @property
    def resolutions(self) -> list[tuple[int, int, int]]:
        return [e.resolution for e in self.experts]

    @property
    def param_counts(self) -> list[int]:
        return [e.param_count for e in self.experts]

    def parameters(self) -> list[Tensor]:
        return [p for e in self.experts for p in e.parameters()]

    def reset_calls(self) -> None:
        for e in self.experts:
            e.calls = 0

    @property
    def calls(self) -> list[int]:
        return [e.calls for e in self.experts]

    def copy(self) -> "ExpertBank":
        return ExpertBank([e.copy() for e in self.experts])

    def to_bytes(self) -> bytes:
        return b"".join(e.to_bytes(self.M) for e in self.experts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ExpertBank":
        experts, pos = [], 0
        while pos < len(blob):
            e, m, pos = Expert.from_bytes(blob, pos)
            experts.append(e)
        if experts and m != len(experts):
            raise ValueError(f"bank blob declares {m} experts but holds {len(experts)}")
        return cls(experts)


def _near_cube(target: float) -> tuple[int, int, int]:
    """Integer triple with axis spread <= 1 whose product is closest to ``target``."""
    r = max(2, int(np.floor(target ** (1.0 / 3.0))))
    best, best_err = None, np.inf
    for base in (r - 1, r, r + 1):
        if base < 2:
            continue
        for extra in itertools.product((0, 1), repeat=3):
            trip = tuple(sorted(base + e for e in extra))
            err = abs(np.prod(trip) - target)
            if err < best_err:
                best, best_err = trip, err
    return best


def bank_resolutions(base_resolution: int, M: int, n_features: int = DEFAULT_FEATURES,
                     hidden: int = DEFAULT_HIDDEN) -> list[tuple[int, int, int]]:
    """Per-axis resolutions so that each expert has about twice the parameters of the previous.

    The doubling targets the full parameter count (grids plus the colour MLP),
    which at small resolutions differs noticeably from doubling voxels.
    """
    if base_resolution < 4:
        raise ValueError(f"base_resolution must be >= 4, got {base_resolution}")
    if M not in (3, 4, 5):
        raise ValueError(f"number of experts must be 3, 4 or 5, got {M}")
    per_voxel = 1 + n_features
    mlp = (n_features + DIR_ENC_DIM) * hidden + hidden + hidden * 3 + 3
    p0 = base_resolution ** 3 * per_voxel + mlp
    out = [(base_resolution,) * 3]
    for i in range(1, M):
        voxels = (p0 * 2 ** i - mlp) / per_voxel
        out.append(_near_cube(voxels))
    return out


def build_bank(base_resolution: int, M: int, seed: int, n_features: int = DEFAULT_FEATURES,
               hidden: int = DEFAULT_HIDDEN, dtype=np.float64) -> ExpertBank:
    resolutions = bank_resolutions(base_resolution, M, n_features, hidden)
    rng = np.random.default_rng(seed)
    experts = [Expert.init(i, res, rng, n_features, hidden, dtype) for i, res in enumerate(resolutions)]
    return ExpertBank(experts)
