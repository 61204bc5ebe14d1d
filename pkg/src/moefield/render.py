"""Cameras, rays, stratified sampling and volume compositing."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class Ray:
    o: np.ndarray
    d: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.o = np.asarray(self.o, dtype=np.float64)
        self.d = np.asarray(self.d, dtype=np.float64)
        if abs(np.linalg.norm(self.d) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValueError(f"need t_near < t_far, got {self.t_near}, {self.t_far}")


@dataclass
class SampledRay:
    t: np.ndarray
    positions: np.ndarray
    deltas: np.ndarray


@dataclass
class Camera:
    """Pinhole camera; ``c2w`` maps camera coordinates (looking down -z, +y up) to world."""

    c2w: np.ndarray
    focal: float
    width: int
    height: int
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape == (3, 4):
            self.c2w = np.vstack([self.c2w, [0.0, 0.0, 0.0, 1.0]])
        rot = self.c2w[:3, :3]
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:3, 3]

    def pixel_rays(self, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Origins and unit directions through pixel centres; ``pixels`` is (P, 2) of (col, row)."""
        px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        x = (px[:, 0] + 0.5 - self.cx) / self.focal
        y = -(px[:, 1] + 0.5 - self.cy) / self.focal
        cam = np.stack([x, y, -np.ones_like(x)], axis=1)
        d = cam @ self.c2w[:3, :3].T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.origin, d.shape).copy()
        return o, d

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """All rays in row-major pixel order, each (H*W, 3)."""
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return self.pixel_rays(np.stack([cols.ravel(), rows.ravel()], axis=1))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = -forward
    c2w[:3, 3] = eye
    return c2w


def ray_box(origins: np.ndarray, dirs: np.ndarray, lo=0.0, hi=1.0):
    """Slab intersection with the box [lo, hi]^3.

    Returns ``(t_near, t_far, hit)``; ``t_near`` is clipped at 0 and missing
    rays get ``t_near = t_far = 0``.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    t_near = np.maximum(tmin.max(axis=1), 0.0)
    t_far = tmax.min(axis=1)
    hit = t_far > t_near + 1e-9
    return np.where(hit, t_near, 0.0), np.where(hit, t_far, 0.0), hit


def sample_t(t_near, t_far, n_samples: int, rng: np.random.Generator | None = None):
    """Sample depths along each ray and the segment lengths used for compositing.

    Without ``rng`` the samples sit at the left edge of ``N`` equal bins; with
    it each is jittered uniformly inside its bin. The last segment runs to
    ``t_far`` and is capped at one bin width.
    """
    if n_samples < 2:
        raise ValueError(f"need at least 2 samples per ray, got {n_samples}")
    tn = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    tf = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    span = (tf - tn)[:, None]
    u = np.arange(n_samples, dtype=np.float64)[None, :]
    if rng is not None:
        u = u + rng.random((tn.shape[0], n_samples))
    t = tn[:, None] + span * u / n_samples
    last = np.minimum(tf[:, None] - t[:, -1:], span / n_samples)
    deltas = np.concatenate([np.diff(t, axis=1), np.maximum(last, 0.0)], axis=1)
    return t, deltas


def sample_ray(ray: Ray, n_samples: int, stratified: bool = False, seed=None) -> SampledRay:
    rng = np.random.default_rng(seed) if stratified else None
    t, deltas = sample_t(ray.t_near, ray.t_far, n_samples, rng)
    t, deltas = t[0], deltas[0]
    return SampledRay(t=t, positions=ray.o[None, :] + t[:, None] * ray.d[None, :], deltas=deltas)


def composite(sigma, color, deltas) -> tuple[Tensor, np.ndarray]:
    """Alpha-composite samples front to back.

    ``sigma`` is (R, N), ``color`` is (R, N, 3), ``deltas`` is (R, N).
    alpha_i = 1 - exp(-sigma_i delta_i) and T_i = prod_{j<i} (1 - alpha_j),
    evaluated as exp(-sum_{j<i} sigma_j delta_j). Returns the (R, 3) colours
    and the (R, N) compositing weights T_i alpha_i.
    """
    sigma, color = ad.as_tensor(sigma), ad.as_tensor(color)
    delta = np.asarray(deltas, dtype=sigma.dtype)
    if sigma.shape != delta.shape or color.shape != sigma.shape + (3,):
        raise ValueError(f"composite: shapes {sigma.shape}, {color.shape}, {delta.shape} do not conform")
    tau = ad.mul(sigma, delta)
    trans = ad.exp(ad.neg(ad.cumsum_exclusive(tau, axis=1)))
    alpha = ad.sub(1.0, ad.exp(ad.neg(tau)))
    weights = ad.mul(trans, alpha)
    w3 = ad.reshape(weights, weights.shape + (1,))
    rgb = ad.sum(ad.mul(w3, color), axis=1)
    return rgb, weights.data


def composite_samples(samples) -> np.ndarray:
    """Composite a single ray given as a list of ``(sigma, rgb, delta)``."""
    if len(samples) == 0:
        return np.zeros(3)
    sig = np.array([[float(s) for s, _, _ in samples]])
    col = np.array([[np.asarray(c, dtype=np.float64) for _, c, _ in samples]])
    dl = np.array([[float(d) for _, _, d in samples]])
    rgb, _ = composite(Tensor(sig), Tensor(col), dl)
    return rgb.data[0]


@dataclass
class FieldOutput:
    """What a radiance field returns for a batch of points."""

    sigma: Tensor  # (P, 1)
    color: Tensor  # (P, 3)
    extra: dict = field(default_factory=dict)


FieldFn = Callable[[np.ndarray, np.ndarray], FieldOutput]


@dataclass
class RenderResult:
    rgb: Tensor
    weights: np.ndarray
    hit: np.ndarray
    field: FieldOutput | None


def expert_field(expert) -> FieldFn:
    def fn(points, dirs):
        sigma, color = expert.query(points, dirs)
        return FieldOutput(sigma, color)
    return fn


def render_rays(field_fn: FieldFn, origins, dirs, n_samples: int,
                rng: np.random.Generator | None = None) -> RenderResult:
    """Render a batch of rays through a field; rays missing the unit cube stay black."""
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n_rays = o.shape[0]
    t_near, t_far, hit = ray_box(o, d)
    idx = np.nonzero(hit)[0]
    if idx.size == 0:
        return RenderResult(Tensor(np.zeros((n_rays, 3))), np.zeros((n_rays, n_samples)), hit, None)
    t, deltas = sample_t(t_near[idx], t_far[idx], n_samples, rng)
    pts = o[idx, None, :] + t[..., None] * d[idx, None, :]
    pdirs = np.broadcast_to(d[idx, None, :], pts.shape)
    out = field_fn(pts.reshape(-1, 3), pdirs.reshape(-1, 3))
    n_hit = idx.size
    sigma = ad.reshape(out.sigma, (n_hit, n_samples))
    color = ad.reshape(out.color, (n_hit, n_samples, 3))
    rgb, weights = composite(sigma, color, deltas)
    full_w = np.zeros((n_rays, n_samples), dtype=weights.dtype)
    full_w[idx] = weights
    if n_hit != n_rays:
        rgb = ad.scatter_rows(rgb, idx, n_rays)
    return RenderResult(rgb, full_w, hit, out)


def render_image(field_fn: FieldFn, camera: Camera, n_samples: int, chunk: int = 4096) -> np.ndarray:
    """Render a full (H, W, 3) image without recording gradients."""
    o, d = camera.rays()
    out = np.zeros((o.shape[0], 3))
    for start in range(0, o.shape[0], chunk):
        sl = slice(start, start + chunk)
        out[sl] = render_rays(field_fn, o[sl], d[sl], n_samples).rgb.data
    return out.reshape(camera.height, camera.width, 3)
