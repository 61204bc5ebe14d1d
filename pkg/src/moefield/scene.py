"""Analytic scenes, exact ground-truth rendering and synthetic view sets."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .render import Camera, composite, look_at, ray_box

SCENE_CENTER = np.array([0.5, 0.5, 0.5])
CAMERA_DISTANCE = 1.5
FOCAL_SCALE = 1.1  # focal length in units of image width
DEFAULT_FINE_N = 512


@dataclass
class Primitive:
    """A sphere (``size`` = radius) or axis-aligned box (``size`` = half extents).

    ``checker`` > 0 alternates the albedo with ``albedo2`` on a 3-D checker of
    that cell size. ``tint`` scales colour by (1 + tint * d . tint_axis).
    """

    kind: str
    center: np.ndarray
    size: np.ndarray
    sigma0: float
    albedo: np.ndarray
    tint: float = 0.0
    tint_axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    checker: float = 0.0
    albedo2: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.broadcast_to(np.asarray(self.size, dtype=np.float64), (3,)).copy()
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.albedo2 = np.asarray(self.albedo2, dtype=np.float64)
        self.tint_axis = np.asarray(self.tint_axis, dtype=np.float64)
        if self.sigma0 < 0:
            raise ValueError("primitive density must be >= 0")
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("albedo must lie in [0, 1]")
        lo, hi = self.bounds()
        if np.any(lo < -1e-12) or np.any(hi > 1 + 1e-12):
            raise ValueError("primitive must lie inside the unit cube")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        ext = self.size if self.kind == "box" else np.full(3, self.size[0])
        return self.center - ext, self.center + ext

    def contains(self, x: np.ndarray) -> np.ndarray:
        rel = x - self.center
        if self.kind == "sphere":
            return np.einsum("pi,pi->p", rel, rel) <= self.size[0] ** 2
        return np.all(np.abs(rel) <= self.size, axis=1)

    def color(self, x: np.ndarray, d: np.ndarray) -> np.ndarray:
        base = np.broadcast_to(self.albedo, x.shape).copy()
        if self.checker > 0:
            parity = np.floor(x / self.checker).astype(np.int64).sum(axis=1) % 2 == 1
            base[parity] = self.albedo2
        if self.tint:
            base = base * (1.0 + self.tint * (d @ self.tint_axis))[:, None]
        return np.clip(base, 0.0, 1.0)

    def intersect(self, o: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Entry and exit depths (t_in > t_out when the ray misses)."""
        if self.kind == "sphere":
            oc = o - self.center
            b = np.einsum("pi,pi->p", oc, d)
            c = np.einsum("pi,pi->p", oc, oc) - self.size[0] ** 2
            disc = b * b - c
            root = np.sqrt(np.maximum(disc, 0.0))
            t_in = np.where(disc > 0, -b - root, 1.0)
            t_out = np.where(disc > 0, -b + root, 0.0)
            return t_in, t_out
        lo, hi = self.bounds()
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (lo - o) * inv
            t1 = (hi - o) * inv
        tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)).max(axis=1)
        tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)).min(axis=1)
        return tmin, tmax


@dataclass
class Scene:
    name: str
    primitives: list[Primitive]


def scene_query(scene: Scene, x, d) -> tuple[np.ndarray, np.ndarray]:
    """Exact density and colour at points ``x`` seen along directions ``d``.

    Density adds over the primitives containing a point; colour is their
    density-weighted mean (black in empty space).
    """
    single = np.ndim(x) == 1
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    dirs = np.broadcast_to(np.asarray(d, dtype=np.float64).reshape(-1, 3), pts.shape)
    sigma = np.zeros(pts.shape[0])
    weighted = np.zeros((pts.shape[0], 3))
    for prim in scene.primitives:
        inside = prim.contains(pts)
        if not inside.any():
            continue
        sigma[inside] += prim.sigma0
        weighted[inside] += prim.sigma0 * prim.color(pts[inside], dirs[inside])
    color = np.divide(weighted, sigma[:, None], out=np.zeros_like(weighted), where=sigma[:, None] > 0)
    if single:
        return sigma[0], color[0]
    return sigma, color


def segment_fields(scene: Scene, o: np.ndarray, d: np.ndarray, t: np.ndarray, deltas: np.ndarray):
    """Interval-averaged density and colour over each bin [t, t + delta).

    Each primitive contributes sigma0 times the fraction of the bin it covers,
    so optical depth is exact for piecewise-constant density; colour is taken
    at the midpoint of the covered part.
    """
    n_rays, n = t.shape
    sigma = np.zeros((n_rays, n))
    weighted = np.zeros((n_rays, n, 3))
    t_end = t + deltas
    for prim in scene.primitives:
        t_in, t_out = prim.intersect(o, d)
        a = np.maximum(t, t_in[:, None])
        b = np.minimum(t_end, t_out[:, None])
        cover = np.clip(b - a, 0.0, None)
        hit = cover > 0
        if not hit.any():
            continue
        frac = np.zeros_like(cover)
        frac[hit] = cover[hit] / deltas[hit]
        mid_t = 0.5 * (a + b)
        ray_ids = np.nonzero(hit)[0]
        pts = o[ray_ids] + mid_t[hit][:, None] * d[ray_ids]
        col = prim.color(pts, d[ray_ids])
        s = prim.sigma0 * frac[hit]
        sigma[hit] += s
        weighted[hit] += s[:, None] * col
    color = np.divide(weighted, sigma[..., None], out=np.zeros_like(weighted), where=sigma[..., None] > 0)
    return sigma, color


def render_truth_rays(scene: Scene, origins, dirs, fine_n: int = DEFAULT_FINE_N) -> np.ndarray:
    if fine_n < 512:
        raise ValueError(f"ground truth needs fine_n >= 512, got {fine_n}")
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((o.shape[0], 3))
    t_near, t_far, hit = ray_box(o, d)
    idx = np.nonzero(hit)[0]
    if idx.size == 0 or not scene.primitives:
        return out
    span = (t_far[idx] - t_near[idx])[:, None]
    t = t_near[idx, None] + span * np.arange(fine_n)[None, :] / fine_n
    deltas = np.broadcast_to(span / fine_n, t.shape).copy()
    sigma, color = segment_fields(scene, o[idx], d[idx], t, deltas)
    with no_grad():
        rgb, _ = composite(sigma, color, deltas)
    out[idx] = rgb.data
    return out


def render_truth(scene: Scene, camera: Camera, fine_n: int = DEFAULT_FINE_N, chunk: int = 2048) -> np.ndarray:
    """Ground-truth (H, W, 3) image through the shared compositing routine."""
    o, d = camera.rays()
    out = np.zeros((o.shape[0], 3))
    for s in range(0, o.shape[0], chunk):
        out[s:s + chunk] = render_truth_rays(scene, o[s:s + chunk], d[s:s + chunk], fine_n)
    return out.reshape(camera.height, camera.width, 3)


# ----------------------------------------------------------------------------
# built-in scenes


def one_sphere() -> Scene:
    return Scene("one-sphere", [
        Primitive("sphere", SCENE_CENTER, 0.3, sigma0=30.0, albedo=[0.85, 0.35, 0.25], tint=0.1),
    ])


def three_spheres_multifreq() -> Scene:
    """A large smooth sphere plus small objects with high-frequency checker albedo."""
    return Scene("three-spheres-multifreq", [
        Primitive("sphere", [0.42, 0.45, 0.42], 0.24, sigma0=30.0, albedo=[0.3, 0.55, 0.85], tint=0.1),
        Primitive("sphere", [0.74, 0.7, 0.3], 0.12, sigma0=30.0, albedo=[0.95, 0.85, 0.2],
                  checker=0.1, albedo2=[0.6, 0.15, 0.1]),
        Primitive("sphere", [0.3, 0.78, 0.72], 0.1, sigma0=30.0, albedo=[0.9, 0.9, 0.9],
                  checker=0.09, albedo2=[0.2, 0.6, 0.3]),
        Primitive("box", [0.72, 0.3, 0.72], [0.1, 0.1, 0.1], sigma0=30.0, albedo=[0.95, 0.95, 0.9],
                  checker=0.1, albedo2=[0.15, 0.15, 0.4]),
        Primitive("box", [0.25, 0.25, 0.2], [0.08, 0.08, 0.08], sigma0=30.0, albedo=[0.9, 0.5, 0.1],
                  checker=0.08, albedo2=[0.3, 0.1, 0.4]),
    ])


def empty_scene() -> Scene:
    return Scene("empty", [])


SCENES = {
    "one-sphere": one_sphere,
    "three-spheres-multifreq": three_spheres_multifreq,
    "empty": empty_scene,
}


def get_scene(name: str) -> Scene:
    try:
        return SCENES[name]()
    except KeyError:
        raise ValueError(f"unknown scene {name!r}; available: {', '.join(sorted(SCENES))}") from None


# ----------------------------------------------------------------------------
# view sets


@dataclass
class ViewSet:
    cameras: list[Camera]
    split: list[str]

    def indices(self, which: str) -> list[int]:
        return [i for i, s in enumerate(self.split) if s == which]


@dataclass
class Dataset:
    views: ViewSet
    images: np.ndarray  # (n_views, H, W, 3) in [0, 1]
    scene_name: str = ""

    @property
    def width(self) -> int:
        return int(self.images.shape[2])

    @property
    def height(self) -> int:
        return int(self.images.shape[1])

    def split(self, which: str) -> tuple[list[Camera], np.ndarray]:
        idx = self.views.indices(which)
        return [self.views.cameras[i] for i in idx], self.images[idx]

    def rays(self, which: str = "train") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Concatenated origins, directions and colours of every pixel in a split."""
        cams, imgs = self.split(which)
        if not cams:
            raise ValueError(f"dataset has no {which!r} views")
        os_, ds_ = zip(*(c.rays() for c in cams))
        return np.concatenate(os_), np.concatenate(ds_), imgs.reshape(-1, 3)


def hemisphere_directions(n: int, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors spread evenly in area over the upper hemisphere.

    A Fibonacci lattice in (z, azimuth) with a random azimuthal rotation and
    a random sub-band offset in z; elevation is kept between z = 0.1 and 0.9.
    """
    z = 0.1 + 0.8 * (np.arange(n) + rng.uniform(0.0, 1.0)) / n
    phi = rng.uniform(0.0, 2.0 * np.pi) + np.arange(n) * np.pi * (3.0 - np.sqrt(5.0))
    r_xy = np.sqrt(1.0 - z ** 2)
    return np.stack([r_xy * np.cos(phi), r_xy * np.sin(phi), z], axis=1)


def hemisphere_cameras(n: int, width: int, height: int, rng: np.random.Generator) -> list[Camera]:
    """Cameras at a fixed distance looking at the scene centre."""
    focal = FOCAL_SCALE * width
    return [
        Camera(look_at(SCENE_CENTER + CAMERA_DISTANCE * u, SCENE_CENTER), focal, width, height)
        for u in hemisphere_directions(n, rng)
    ]


def make_dataset(scene: Scene, n_train: int = 16, n_test: int = 4, width: int = 64, height: int = 64,
                 seed: int = 0, fine_n: int = DEFAULT_FINE_N) -> Dataset:
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one train and one test view")
    rng = np.random.default_rng(seed)
    # separate lattices so test views fall between training views
    cams = hemisphere_cameras(n_train, width, height, rng) + hemisphere_cameras(n_test, width, height, rng)
    split = ["train"] * n_train + ["test"] * n_test
    images = np.stack([render_truth(scene, c, fine_n) for c in cams])
    return Dataset(ViewSet(cams, split), images, scene.name)


def save_dataset(dataset: Dataset, out_dir: str) -> list[str]:
    """Write one PPM per view plus ``manifest.txt``; returns the written paths."""
    from .imageio import write_ppm

    os.makedirs(out_dir, exist_ok=True)
    lines, written = [], []
    for i, (cam, split) in enumerate(zip(dataset.views.cameras, dataset.views.split)):
        name = f"{split}_{i:03d}.ppm"
        path = os.path.join(out_dir, name)
        write_ppm(path, dataset.images[i])
        written.append(path)
        pose = " ".join(repr(float(v)) for v in cam.c2w.reshape(-1))
        lines.append(f"{name} {pose} {float(cam.focal)!r} {split}")
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w") as f:
        f.write(f"# scene {dataset.scene_name}\n")
        f.write("\n".join(lines) + "\n")
    written.append(manifest)
    return written


def load_dataset(out_dir: str) -> Dataset:
    from .imageio import read_ppm

    manifest = os.path.join(out_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest.txt in {out_dir}")
    cams, split, images, scene_name = [], [], [], ""
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "scene":
                    scene_name = parts[1]
                continue
            parts = line.split()
            if len(parts) != 19:
                raise ValueError(f"bad manifest line: {line!r}")
            img = read_ppm(os.path.join(out_dir, parts[0])).astype(np.float64) / 255.0
            pose = np.array([float(v) for v in parts[1:17]]).reshape(4, 4)
            cams.append(Camera(pose, float(parts[17]), img.shape[1], img.shape[0]))
            split.append(parts[18])
            images.append(img)
    return Dataset(ViewSet(cams, split), np.stack(images), scene_name)
