"""Image quality, active-parameter counts and an analytic FLOP model."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .losses import photometric_loss
from .moe import MixtureOfExperts
from .render import Camera, expert_field, render_image, render_rays

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _to_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img.mean(axis=2) if img.ndim == 3 else img


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.shape[0]
    rows = sliding_window_view(img, n, axis=0) @ g
    return sliding_window_view(rows, n, axis=1) @ g


def ssim(a, b) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows of the gray images."""
    x, y = _to_gray(a), _to_gray(b)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    g = gaussian_window()
    mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x ** 2
    syy = _filter_valid(y * y, g) - mu_y ** 2
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


# ----------------------------------------------------------------------------
# rendering with routing statistics


@dataclass
class DispatchStats:
    """Routing totals accumulated over a render."""

    counts: np.ndarray  # per-expert dispatched points
    n_filtered: int
    n_samples: int

    @classmethod
    def empty(cls, M: int) -> "DispatchStats":
        return cls(np.zeros(M, dtype=np.int64), 0, 0)

    def add(self, info, n_samples: int) -> None:
        self.counts = self.counts + info.counts
        self.n_filtered += info.n_points
        self.n_samples += n_samples

    @property
    def fractions(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total else np.zeros_like(self.counts, dtype=np.float64)

    @property
    def mean_expert_index(self) -> float:
        """Dispatch-weighted mean expert index."""
        total = self.counts.sum()
        return float((self.counts * np.arange(self.counts.shape[0])).sum() / total) if total else 0.0


def render_moe_image(moe: MixtureOfExperts, camera: Camera, n_samples: int, chunk: int = 4096,
                     only_expert: int | None = None, stats: DispatchStats | None = None) -> np.ndarray:
    o, d = camera.rays()
    out = np.zeros((o.shape[0], 3))
    field_fn = (lambda p, dd: moe(p, dd, only_expert=only_expert))
    with ad.no_grad():
        for s in range(0, o.shape[0], chunk):
            res = render_rays(field_fn, o[s:s + chunk], d[s:s + chunk], n_samples)
            out[s:s + chunk] = res.rgb.data
            if stats is not None and res.field is not None:
                stats.add(res.field.extra["routing"], res.field.extra["routing"].keep.shape[0])
    return out.reshape(camera.height, camera.width, 3)


def render_gate_image(moe: MixtureOfExperts, camera: Camera, expert: int, n_samples: int,
                      chunk: int = 4096) -> np.ndarray:
    """Gate probability of ``expert`` composited along each ray, as a grayscale (H, W) image.

    The probability replaces colour in the compositing sum, so the result is
    the visible surface's routing probability.
    """
    o, d = camera.rays()
    out = np.zeros(o.shape[0])

    def field_fn(p, dd):
        res = moe(p, dd)
        info = res.extra["routing"]
        prob = np.zeros((p.shape[0], 3))
        if info.probs is not None:
            prob[info.keep] = info.probs.data[:, expert:expert + 1]
        res.color = ad.Tensor(prob.astype(res.sigma.dtype))
        return res

    with ad.no_grad():
        for s in range(0, o.shape[0], chunk):
            out[s:s + chunk] = render_rays(field_fn, o[s:s + chunk], d[s:s + chunk], n_samples).rgb.data[:, 0]
    return out.reshape(camera.height, camera.width)


# ----------------------------------------------------------------------------
# active parameters


def cast_moe(moe: MixtureOfExperts, dtype) -> MixtureOfExperts:
    """Copy of ``moe`` with every parameter cast to ``dtype``."""
    bank, gate = moe.bank.copy(), moe.gate.copy()
    for p in bank.parameters() + gate.parameters():
        p.data = p.data.astype(dtype)
    return MixtureOfExperts(bank, gate, moe.density_filter, moe.k)


@dataclass
class ActiveParams:
    total: int
    per_expert: list[int]
    gate: int

    def __int__(self) -> int:
        return self.total


def active_params(moe: MixtureOfExperts, cameras: list[Camera], images, n_samples: int,
                  chunk: int = 4096, include_gate: bool = True) -> ActiveParams:
    """Count parameters with a non-zero photometric-loss gradient over the given views.

    The model is copied to float64, so the zero test runs on float64 sums.
    """
    if not cameras:
        raise ValueError("need at least one view")
    model = cast_moe(moe, np.float64)
    params = model.parameters()
    for p in params:
        p.zero_grad()
    field_fn = (lambda p, dd: model(p, dd))
    with ad.enable_grad():
        for cam, img in zip(cameras, images):
            o, d = cam.rays()
            truth = np.asarray(img, dtype=np.float64).reshape(-1, 3)
            for s in range(0, o.shape[0], chunk):
                res = render_rays(field_fn, o[s:s + chunk], d[s:s + chunk], n_samples)
                loss = photometric_loss(res.rgb, truth[s:s + chunk])
                if loss.requires_grad:
                    ad.backward(loss)
    per_expert = []
    for e in model.bank:
        per_expert.append(int(sum(np.count_nonzero(p.grad) for p in e.parameters() if p.grad is not None)))
    gate = int(sum(np.count_nonzero(p.grad) for p in model.gate.parameters() if p.grad is not None))
    total = sum(per_expert) + (gate if include_gate else 0)
    return ActiveParams(total, per_expert, gate)


# ----------------------------------------------------------------------------
# FLOPs


@dataclass
class FlopReport:
    filter: float
    gate: float
    experts: float

    @property
    def total(self) -> float:
        return self.filter + self.gate + self.experts

    @property
    def gflops(self) -> float:
        return self.total / 1e9


def flops_per_image(moe: MixtureOfExperts, stats: DispatchStats, width: int, height: int,
                    n_samples: int) -> FlopReport:
    """Analytic forward cost: filter lookups on every sample, gate and routed experts on kept points.

    Interpolation is 24 flops per channel (8 corners, multiply-add plus weight);
    each dense layer costs 2 * fan_in * fan_out.
    """
    filt = 0.0
    if moe.density_filter is not None:
        filt = float(width * height * n_samples * moe.density_filter.flops_per_point())
    gate = float(stats.n_filtered * moe.gate.flops_per_point())
    experts = float(sum(c * e.flops_per_point() for c, e in zip(stats.counts, moe.bank)))
    return FlopReport(filt, gate, experts)


# ----------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    psnr: float
    ssim: float
    w0: int
    gflops: float
    dispatch_frac: list[float] = field(default_factory=list)

    def csv_row(self) -> dict:
        row = {k: v for k, v in asdict(self).items() if k != "dispatch_frac"}
        for i, f in enumerate(self.dispatch_frac):
            row[f"dispatch_frac_{i}"] = f
        return row

    def to_csv(self) -> str:
        row = self.csv_row()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)
        return buf.getvalue()


def evaluate(moe: MixtureOfExperts, cameras: list[Camera], images, n_samples: int,
             with_w0: bool = True) -> tuple[EvalReport, list[np.ndarray]]:
    stats = DispatchStats.empty(moe.M)
    renders = [render_moe_image(moe, c, n_samples, stats=stats) for c in cameras]
    p = float(np.mean([psnr(r, t) for r, t in zip(renders, images)]))
    s = float(np.mean([ssim(r, t) for r, t in zip(renders, images)]))
    w0 = int(active_params(moe, cameras, images, n_samples)) if with_w0 else -1
    cam, n = cameras[0], len(cameras)
    per_image = DispatchStats(stats.counts / n, stats.n_filtered / n, stats.n_samples // n)
    flops = flops_per_image(moe, per_image, cam.width, cam.height, n_samples)
    report = EvalReport(p, s, w0, flops.gflops, stats.fractions.tolist())
    return report, renders


def evaluate_expert(expert, cameras: list[Camera], images, n_samples: int, chunk: int = 4096,
                    with_w0: bool = True) -> tuple[EvalReport, list[np.ndarray]]:
    """Evaluate one expert on its own: no filter, no gate."""
    evaluated = 0

    def field_fn(p, dd):
        nonlocal evaluated
        evaluated += p.shape[0]
        return expert_field(expert)(p, dd)

    with ad.no_grad():
        renders = [render_image(field_fn, c, n_samples, chunk) for c in cameras]
    p = float(np.mean([psnr(r, t) for r, t in zip(renders, images)]))
    s = float(np.mean([ssim(r, t) for r, t in zip(renders, images)]))
    w0 = -1
    if with_w0:
        model = expert.copy()
        for q in model.parameters():
            q.data = q.data.astype(np.float64)
            q.zero_grad()
        with ad.enable_grad():
            for cam, img in zip(cameras, images):
                o, d = cam.rays()
                truth = np.asarray(img, dtype=np.float64).reshape(-1, 3)
                for st in range(0, o.shape[0], chunk):
                    res = render_rays(expert_field(model), o[st:st + chunk], d[st:st + chunk], n_samples)
                    loss = photometric_loss(res.rgb, truth[st:st + chunk])
                    if loss.requires_grad:
                        ad.backward(loss)
        w0 = int(sum(np.count_nonzero(q.grad) for q in model.parameters() if q.grad is not None))
    gflops = evaluated / len(cameras) * expert.flops_per_point() / 1e9
    return EvalReport(p, s, w0, gflops, [1.0]), renders
