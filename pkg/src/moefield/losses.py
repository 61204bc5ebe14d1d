"""Photometric loss, load-balancing auxiliary losses and resolution penalties."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PENALTY_KINDS = ("none", "linear", "geometric", "quadratic")
DEFAULT_LAMBDA = 1e-3


def photometric_loss(rendered, truth) -> Tensor:
    """Mean over rays of the squared L2 colour error."""
    rendered = ad.as_tensor(rendered)
    truth = np.asarray(truth, dtype=rendered.dtype)
    if rendered.shape != truth.shape:
        raise ValueError(f"rendered {rendered.shape} and truth {truth.shape} differ in shape")
    n_rays = rendered.shape[0] if rendered.data.ndim > 1 else 1
    per = ad.sum(ad.square(ad.sub(rendered, truth)))
    return ad.mul(per, 1.0 / n_rays)


@dataclass
class BatchRoutingStats:
    """Dispatch counts ``c`` (constant), probability masses ``m`` and batch size."""

    c: np.ndarray
    m: Tensor
    batch_size: int

    @property
    def M(self) -> int:
        return int(self.c.shape[0])

    @classmethod
    def from_routing(cls, probs: Tensor | None, topk: np.ndarray, M: int) -> "BatchRoutingStats":
        counts = np.bincount(np.asarray(topk).reshape(-1), minlength=M).astype(np.float64)
        if probs is None or probs.shape[0] == 0:
            return cls(counts, Tensor(np.zeros(M)), 0)
        return cls(counts, ad.sum(probs, axis=0), int(probs.shape[0]))

    @classmethod
    def from_arrays(cls, c, m, batch_size: int) -> "BatchRoutingStats":
        return cls(np.asarray(c, dtype=np.float64), ad.as_tensor(m), int(batch_size))


def penalty_weights(kind: str, M: int) -> np.ndarray:
    """Per-expert resolution penalties, lowest resolution first."""
    if kind == "none":
        return np.ones(M)
    if kind == "linear":
        return 1.0 + np.arange(M, dtype=np.float64)
    if kind == "quadratic":
        return 2.0 ** np.arange(M, dtype=np.float64)
    if kind == "geometric":
        if M == 1:
            return np.ones(1)
        ratio = np.exp(np.log(M) / (M - 1))
        w = ratio ** np.arange(M, dtype=np.float64)
        # the last entry is M mathematically; pin it against rounding
        w[0], w[-1] = 1.0, float(M)
        return w
    raise ValueError(f"unknown penalty kind {kind!r}; expected one of {PENALTY_KINDS}")


@dataclass
class PenaltySchedule:
    kind: str
    weights: np.ndarray

    @classmethod
    def make(cls, kind: str, M: int) -> "PenaltySchedule":
        return cls(kind, penalty_weights(kind, M))


def aux_loss(stats: BatchRoutingStats) -> Tensor:
    """(M / |B|^2) * sum_i c_i m_i; zero for an empty batch."""
    return rw_aux_loss(stats, PenaltySchedule.make("none", stats.M))


def rw_aux_loss(stats: BatchRoutingStats, schedule: PenaltySchedule) -> Tensor:
    """(M / |B|^2) * sum_i c_i m_i w_i; gradients flow through ``m`` only."""
    M = stats.M
    w = np.asarray(schedule.weights, dtype=np.float64)
    if w.shape != (M,):
        raise ValueError(f"schedule has {w.shape[0]} weights for {M} experts")
    if stats.batch_size == 0:
        return Tensor(np.zeros((), dtype=stats.m.dtype))
    coeff = (stats.c * w * (M / stats.batch_size ** 2)).astype(stats.m.dtype)
    return ad.sum(ad.mul(stats.m, coeff))


def total_loss(l_nerf, l_rw_aux, lam: float = DEFAULT_LAMBDA) -> Tensor:
    return ad.add(l_nerf, ad.mul(l_rw_aux, lam))
