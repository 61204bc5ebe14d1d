"""Error algebra for mixing two predictors with weights (alpha, 1 - alpha).

With per-output errors e1 = y1 - y_hat and e2 = y2 - y_hat, and the mean
squared gap D2 = mean((y1 - y2)^2), the mixed error is exactly

    E_ens(alpha) = alpha E1 + (1 - alpha) E2 - alpha (1 - alpha) D2

so the improvement over the first predictor, E1 - E_ens, is the concave
quadratic implemented by :func:`improvement_margin`.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PairedPredictions:
    y1: np.ndarray
    y2: np.ndarray
    y_hat: np.ndarray

    def __post_init__(self):
        arrs = [np.asarray(a, dtype=np.float64).reshape(-1) for a in (self.y1, self.y2, self.y_hat)]
        if len({a.size for a in arrs}) != 1:
            raise ValueError(f"prediction lengths differ: {[a.size for a in arrs]}")
        if arrs[0].size == 0:
            raise ValueError("empty predictions")
        if not all(np.all(np.isfinite(a)) for a in arrs):
            raise ValueError("predictions must be finite")
        for name, a in zip(("y1", "y2", "y_hat"), arrs):
            object.__setattr__(self, name, a)

    @property
    def J(self) -> int:
        return self.y1.size

    @classmethod
    def random(cls, rng: np.random.Generator, J: int = 16, scale: float = 1.0) -> "PairedPredictions":
        return cls(rng.normal(0, scale, J), rng.normal(0, scale, J), rng.normal(0, scale, J))


def _mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((a - b) ** 2))


def error_gap(p: PairedPredictions) -> float:
    """E1 - E2."""
    return _mse(p.y1, p.y_hat) - _mse(p.y2, p.y_hat)


def gap_sq(p: PairedPredictions) -> float:
    """Mean squared difference between the two predictors."""
    return _mse(p.y1, p.y2)


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")


def ensemble_error(p: PairedPredictions, alpha: float) -> float:
    _check_alpha(alpha)
    return _mse(alpha * p.y1 + (1.0 - alpha) * p.y2, p.y_hat)


def improvement_margin(p: PairedPredictions, alpha: float) -> float:
    """(1 - a) dE - mean((a^2 - a)(y1 - y2)^2); positive exactly when mixing beats y1."""
    _check_alpha(alpha)
    return (1.0 - alpha) * error_gap(p) - float(np.mean((alpha ** 2 - alpha) * (p.y1 - p.y2) ** 2))


def optimal_alpha(delta_e: float, gap_sq: float = 1.0) -> float:
    """Stationary point of the margin, clamped to [0, 1].

    The default ``gap_sq = 1`` gives ``(1 - delta_e) / 2``. Passing the
    instance's actual mean squared gap gives the true maximiser
    ``1/2 - delta_e / (2 gap_sq)``.
    """
    if gap_sq <= 0:
        raise ValueError(f"gap_sq must be positive, got {gap_sq}")
    return float(np.clip(0.5 - delta_e / (2.0 * gap_sq), 0.0, 1.0))


def sweep(p: PairedPredictions, step: float = 1e-3) -> np.ndarray:
    """Rows of (alpha, E_ens, margin) on a uniform grid over [0, 1]."""
    a = np.linspace(0.0, 1.0, int(round(1.0 / step)) + 1)[:, None]
    e_ens = np.mean((a * p.y1 + (1.0 - a) * p.y2 - p.y_hat) ** 2, axis=1)
    margin = (1.0 - a[:, 0]) * error_gap(p) - np.mean((a ** 2 - a) * (p.y1 - p.y2) ** 2, axis=1)
    return np.column_stack([a[:, 0], e_ens, margin])


def sweep_argmax(p: PairedPredictions, step: float = 1e-3) -> float:
    rows = sweep(p, step)
    return float(rows[np.argmax(rows[:, 2]), 0])


def sweep_csv(p: PairedPredictions, step: float = 1e-3) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["alpha", "e_ens", "margin"])
    for a, e, m in sweep(p, step):
        w.writerow([f"{a:.6f}", repr(float(e)), repr(float(m))])
    return buf.getvalue()


@dataclass
class SignCheck:
    n: int
    agree: int
    counterexamples: list[tuple[int, float, float]]

    @property
    def all_agree(self) -> bool:
        return self.agree == self.n


def check_margin_sign(n: int, seed: int = 0, J: int = 16, tol: float = 1e-12) -> SignCheck:
    """Compare sign(margin) with sign(E1 - E_ens) on random instances and alphas.

    Instances where both sides are within ``tol`` of zero count as agreeing.
    """
    rng = np.random.default_rng(seed)
    agree, bad = 0, []
    for i in range(n):
        p = PairedPredictions.random(rng, J)
        a = float(rng.uniform())
        m = improvement_margin(p, a)
        direct = _mse(p.y1, p.y_hat) - ensemble_error(p, a)
        if (abs(m) <= tol and abs(direct) <= tol) or np.sign(m) == np.sign(direct):
            agree += 1
        else:
            bad.append((i, m, direct))
    return SignCheck(n, agree, bad)
