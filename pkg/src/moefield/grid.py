"""Dense voxel grids over the unit cube with trilinear interpolation."""
from __future__ import annotations

import struct

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor

GRID_MAGIC = b"MFG1"
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

# corner offsets in (dx, dy, dz) order, index = 4*dx + 2*dy + dz
CORNERS = np.array([[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.intp)


def softplus(x):
    """Numerically stable ``ln(1 + exp(x))`` on plain arrays or scalars."""
    return np.logaddexp(0.0, x)


def density_activation(raw):
    if isinstance(raw, Tensor):
        return ad.softplus(raw)
    return softplus(raw)


def trilinear_weights(points: np.ndarray, resolution) -> tuple[np.ndarray, np.ndarray]:
    """Flat corner indices and weights for each query point.

    Nodes sit on a corner lattice: node ``i`` along an axis with ``R`` nodes
    is at ``i / (R - 1)``. Points are clamped to [0, 1]^3 first.

    Returns ``(index, weight)``, both of shape (P, 8).
    """
    res = np.asarray(resolution, dtype=np.intp)
    pts = np.clip(np.asarray(points, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
    u = pts * (res - 1)
    base = np.clip(np.floor(u).astype(np.intp), 0, res - 2)
    frac = u - base
    strides = np.array([res[1] * res[2], res[2], 1], dtype=np.intp)
    index = (base @ strides)[:, None] + (CORNERS @ strides)[None, :]
    # per-axis (1 - f, f) pairs, outer product in CORNERS order
    wx = np.stack([1.0 - frac[:, 0], frac[:, 0]], axis=1)
    wy = np.stack([1.0 - frac[:, 1], frac[:, 1]], axis=1)
    wz = np.stack([1.0 - frac[:, 2], frac[:, 2]], axis=1)
    weight = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)
    return index, weight


def interpolation_matrix(points: np.ndarray, resolution, dtype=np.float64) -> sp.csr_matrix:
    index, weight = trilinear_weights(points, resolution)
    n = index.shape[0]
    n_nodes = int(np.prod(resolution))
    indptr = np.arange(0, 8 * n + 1, 8)
    return sp.csr_matrix(
        (weight.reshape(-1).astype(dtype), index.reshape(-1), indptr), shape=(n, n_nodes)
    )


class VoxelGrid:
    """Axis-aligned grid of per-node channels spanning [0, 1]^3."""

    def __init__(self, values, requires_grad: bool = True):
        vals = values if isinstance(values, Tensor) else Tensor(values, requires_grad=requires_grad)
        if vals.data.ndim != 4:
            raise ValueError(f"grid values must be (Rx, Ry, Rz, C), got {vals.shape}")
        if min(vals.shape[:3]) < 2 or vals.shape[3] < 1:
            raise ValueError(f"grid needs >= 2 nodes per axis and >= 1 channel, got {vals.shape}")
        self.values = vals

    @classmethod
    def zeros(cls, resolution, channels: int, dtype=np.float64, requires_grad: bool = True):
        res = _as_resolution(resolution)
        return cls(np.zeros(res + (channels,), dtype=dtype), requires_grad=requires_grad)

    @classmethod
    def full(cls, resolution, channels: int, value: float, dtype=np.float64, requires_grad=True):
        res = _as_resolution(resolution)
        return cls(np.full(res + (channels,), value, dtype=dtype), requires_grad=requires_grad)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(int(r) for r in self.values.shape[:3])

    @property
    def channels(self) -> int:
        return int(self.values.shape[3])

    @property
    def size(self) -> int:
        return int(self.values.size)

    def interpolate(self, points, weights: sp.csr_matrix | None = None) -> Tensor:
        """Trilinear blend of the 8 surrounding nodes, shape (P, C).

        Differentiable with respect to the grid values only.
        """
        if weights is None:
            weights = interpolation_matrix(points, self.resolution, self.values.dtype)
        flat = ad.reshape(self.values, (-1, self.channels))
        return ad.sparse_matmul(weights, flat)

    def sample(self, points) -> np.ndarray:
        """Interpolate without recording a gradient."""
        index, weight = trilinear_weights(points, self.resolution)
        flat = self.values.data.reshape(-1, self.channels)
        return np.einsum("pk,pkc->pc", weight, flat[index])

    def copy(self, requires_grad: bool | None = None) -> "VoxelGrid":
        rg = self.values.requires_grad if requires_grad is None else requires_grad
        return VoxelGrid(self.values.data.copy(), requires_grad=rg)

    def to_bytes(self) -> bytes:
        return grid_to_bytes(self.values.data)

    @classmethod
    def from_bytes(cls, blob: bytes, requires_grad: bool = True) -> "VoxelGrid":
        arr, _ = grid_from_bytes(blob)
        return cls(arr, requires_grad=requires_grad)


def _as_resolution(resolution) -> tuple[int, int, int]:
    if np.isscalar(resolution):
        r = int(resolution)
        return (r, r, r)
    res = tuple(int(r) for r in resolution)
    if len(res) != 3:
        raise ValueError(f"resolution must have 3 entries, got {resolution}")
    return res


def grid_to_bytes(values: np.ndarray) -> bytes:
    """Serialise a (Rx, Ry, Rz, C) array: magic, 5 little-endian u32s, row-major data."""
    arr = np.asarray(values)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise ValueError(f"unsupported grid dtype {arr.dtype}")
    rx, ry, rz, c = arr.shape
    header = GRID_MAGIC + struct.pack("<5I", rx, ry, rz, c, _DTYPE_CODES[dt])
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def grid_from_bytes(blob: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Inverse of :func:`grid_to_bytes`; returns the array and the end offset."""
    if blob[offset:offset + 4] != GRID_MAGIC:
        raise ValueError("not a grid blob (bad magic)")
    rx, ry, rz, c, code = struct.unpack_from("<5I", blob, offset + 4)
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    dt = _CODE_DTYPES[code]
    start = offset + 24
    count = rx * ry * rz * c
    end = start + count * dt.itemsize
    if end > len(blob):
        raise ValueError("truncated grid blob")
    arr = np.frombuffer(blob, dtype=dt, count=count, offset=start).reshape(rx, ry, rz, c)
    return arr.astype(dt.newbyteorder("="), copy=True), end
