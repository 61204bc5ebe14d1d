"""Two-phase training: independent expert pre-training, then joint MoE optimisation."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .experts import ExpertBank, build_bank
from .gate import DEFAULT_GATE_RESOLUTION, Gate, gate_for
from .losses import (BatchRoutingStats, PenaltySchedule, photometric_loss, rw_aux_loss,
                     total_loss)
from .moe import DensityFilter, MixtureOfExperts
from .optim import Adam
from .render import expert_field, render_rays
from .scene import Dataset

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    M: int = 3
    k: int = 2
    lam: float = 1e-3
    pretrain_iters: int = 300
    joint_iters: int = 700
    batch_rays: int = 1024
    n_samples: int = 64
    lr_grid: float = 1e-1
    lr_mlp: float = 1e-2
    penalty: str = "geometric"
    seed: int = 0
    gate_resolution: int = DEFAULT_GATE_RESOLUTION
    base_resolution: int = 16
    threshold: float = 1e-3
    dtype: str = "float32"
    freeze_gate: bool = False

    def validate(self) -> "TrainConfig":
        if self.M not in (3, 4, 5):
            raise ValueError(f"M must be 3, 4 or 5, got {self.M}")
        if not 1 <= self.k <= self.M:
            raise ValueError(f"k must be in [1, M={self.M}], got {self.k}")
        for name in ("batch_rays", "lr_grid", "lr_mlp", "gate_resolution", "base_resolution"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("pretrain_iters", "joint_iters", "lam", "threshold"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.penalty not in ("none", "linear", "geometric", "quadratic"):
            raise ValueError(f"unknown penalty {self.penalty!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class TrainReport:
    l_nerf: list[float] = field(default_factory=list)
    l_rw_aux: list[float] = field(default_factory=list)
    l_tot: list[float] = field(default_factory=list)
    dispatch_frac: list[list[float]] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)
    test_psnr: float | None = None
    test_ssim: float | None = None
    wall_time: float = 0.0

    def to_csv(self) -> str:
        M = len(self.dispatch_frac[0]) if self.dispatch_frac else 0
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["iteration", "l_nerf", "l_rw_aux", "l_tot"] + [f"dispatch_frac_{i}" for i in range(M)])
        for i, (a, b, c, f) in enumerate(zip(self.l_nerf, self.l_rw_aux, self.l_tot, self.dispatch_frac)):
            w.writerow([i, repr(a), repr(b), repr(c)] + [repr(x) for x in f])
        return buf.getvalue()


class RayBatcher:
    """Uniform random ray batches from the training views."""

    def __init__(self, dataset: Dataset, batch_rays: int):
        self.origins, self.dirs, self.colors = dataset.rays("train")
        if self.origins.shape[0] == 0:
            raise ValueError("dataset has no training rays")
        self.batch_rays = batch_rays

    def sample(self, rng: np.random.Generator):
        idx = rng.integers(0, self.origins.shape[0], size=self.batch_rays)
        return self.origins[idx], self.dirs[idx], self.colors[idx]


def _check_finite(value: float, what: str, it: int) -> None:
    if not np.isfinite(value):
        raise FloatingPointError(f"{what} became {value} at iteration {it}")


def _param_groups(grids, mlps, config: TrainConfig):
    groups = []
    if grids:
        groups.append((grids, config.lr_grid))
    if mlps:
        groups.append((mlps, config.lr_mlp))
    return groups


def pretrain_expert(expert, batcher: RayBatcher, config: TrainConfig, iters: int,
                    rng: np.random.Generator, optimizer: Adam | None = None) -> list[float]:
    """Fit one expert alone on the photometric loss; returns the loss per iteration."""
    opt = optimizer or Adam(_param_groups(expert.grid_parameters(), expert.mlp_parameters(), config))
    field_fn = expert_field(expert)
    losses = []
    for it in range(iters):
        o, d, rgb = batcher.sample(rng)
        res = render_rays(field_fn, o, d, config.n_samples, rng)
        loss = photometric_loss(res.rgb, rgb)
        _check_finite(loss.item(), f"expert {expert.index} photometric loss", it)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        losses.append(loss.item())
    return losses


def pretrain_experts(bank: ExpertBank, dataset: Dataset, config: TrainConfig) -> ExpertBank:
    """Train every expert independently (in place) for ``pretrain_iters`` iterations."""
    config.validate()
    batcher = RayBatcher(dataset, config.batch_rays)
    for e in bank:
        rng = np.random.default_rng([config.seed, 1, e.index])
        pretrain_expert(e, batcher, config, config.pretrain_iters, rng)
    return bank


def train_single_experts(dataset: Dataset, config: TrainConfig) -> ExpertBank:
    """Baseline: every expert of a fresh bank trained alone for pretrain + joint iterations.

    Uses the same seeds as :func:`pretrain_experts`, so the first
    ``pretrain_iters`` steps coincide with the MoE's pre-training.
    """
    config.validate()
    bank = build_bank(config.base_resolution, config.M, config.seed, dtype=config.np_dtype)
    batcher = RayBatcher(dataset, config.batch_rays)
    for e in bank:
        rng = np.random.default_rng([config.seed, 1, e.index])
        pretrain_expert(e, batcher, config, config.pretrain_iters + config.joint_iters, rng)
    return bank


class MoETrainer:
    """Joint optimisation of gate and experts on the photometric plus auxiliary loss."""

    def __init__(self, moe: MixtureOfExperts, dataset: Dataset, config: TrainConfig):
        self.moe = moe
        self.config = config.validate()
        self.batcher = RayBatcher(dataset, config.batch_rays)
        self.rng = np.random.default_rng([config.seed, 2])
        self.schedule = PenaltySchedule.make(config.penalty, moe.M)
        grids = [p for e in moe.bank for p in e.grid_parameters()]
        mlps = [p for e in moe.bank for p in e.mlp_parameters()]
        if not config.freeze_gate:
            grids += moe.gate.grid_parameters()
            mlps += moe.gate.mlp_parameters()
        self.optimizer = Adam(_param_groups(grids, mlps, config))
        self.iteration = 0
        self.report = TrainReport()

    def loss(self, o, d, rgb):
        """Forward pass; returns (l_tot, l_nerf, l_rw_aux, routing info)."""
        res = render_rays(self.moe, o, d, self.config.n_samples, self.rng)
        l_nerf = photometric_loss(res.rgb, rgb)
        if res.field is None:
            return l_nerf, l_nerf, ad.Tensor(np.zeros(())), None
        info = res.field.extra["routing"]
        stats = BatchRoutingStats.from_routing(info.probs, info.topk, self.moe.M)
        l_aux = rw_aux_loss(stats, self.schedule)
        return total_loss(l_nerf, l_aux, self.config.lam), l_nerf, l_aux, info

    def step(self) -> float | None:
        """One joint iteration; returns the total loss or ``None`` when skipped."""
        it = self.iteration
        o, d, rgb = self.batcher.sample(self.rng)
        l_tot, l_nerf, l_aux, info = self.loss(o, d, rgb)
        self.iteration += 1
        if info is None or info.n_points == 0:
            log.info("iteration %d: no points survived filtering, step skipped", it)
            self.report.skipped.append(it)
            return None
        value = l_tot.item()
        _check_finite(value, "total loss", it)
        self.optimizer.zero_grad()
        ad.backward(l_tot)
        self.optimizer.step()
        self.report.l_nerf.append(l_nerf.item())
        self.report.l_rw_aux.append(l_aux.item())
        self.report.l_tot.append(value)
        self.report.dispatch_frac.append((info.counts / info.counts.sum()).tolist())
        return value

    def run(self, iters: int) -> TrainReport:
        t0 = time.perf_counter()
        for _ in range(iters):
            self.step()
        self.report.wall_time += time.perf_counter() - t0
        return self.report

    # checkpointing ---------------------------------------------------------

    def save(self, path: str) -> None:
        os.makedirs(path, exist_ok=True)
        save_moe(self.moe, path)
        np.savez(os.path.join(path, "optimizer.npz"), **self.optimizer.state_arrays())
        state = {
            "iteration": self.iteration,
            "rng": self.rng.bit_generator.state,
            "config": asdict(self.config),
            "report": asdict(self.report),
        }
        with open(os.path.join(path, "trainer.json"), "w") as f:
            json.dump(state, f)

    @classmethod
    def resume(cls, path: str, dataset: Dataset) -> "MoETrainer":
        with open(os.path.join(path, "trainer.json")) as f:
            state = json.load(f)
        config = TrainConfig(**state["config"])
        trainer = cls(load_moe(path), dataset, config)
        with np.load(os.path.join(path, "optimizer.npz")) as arrays:
            trainer.optimizer.load_state_arrays(arrays)
        trainer.iteration = state["iteration"]
        trainer.rng.bit_generator.state = state["rng"]
        trainer.report = TrainReport(**state["report"])
        return trainer


def build_moe(bank: ExpertBank, config: TrainConfig, gate: Gate | None = None) -> MixtureOfExperts:
    """Assemble the MoE; the filter is a frozen copy of the lowest-resolution density grid."""
    gate = gate or gate_for(bank, config.gate_resolution, seed=config.seed, dtype=config.np_dtype)
    filt = DensityFilter.from_expert(bank[0], config.threshold)
    return MixtureOfExperts(bank, gate, filt, config.k)


def train_moe(bank: ExpertBank, gate: Gate, dataset: Dataset, config: TrainConfig,
              moe: MixtureOfExperts | None = None):
    """Joint phase; returns (bank, gate, report). Parameters are updated in place."""
    moe = moe or build_moe(bank, config, gate)
    trainer = MoETrainer(moe, dataset, config)
    report = trainer.run(config.joint_iters)
    return moe.bank, moe.gate, report


def run_pipeline(dataset: Dataset, config: TrainConfig, bank: ExpertBank | None = None):
    """create experts -> pre-train -> create gate -> joint training. Returns (moe, report)."""
    config.validate()
    if bank is None:
        bank = build_bank(config.base_resolution, config.M, config.seed, dtype=config.np_dtype)
        pretrain_experts(bank, dataset, config)
    moe = build_moe(bank, config)
    trainer = MoETrainer(moe, dataset, config)
    report = trainer.run(config.joint_iters)
    return moe, report


# ----------------------------------------------------------------------------
# MoE checkpoints


def save_moe(moe: MixtureOfExperts, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "experts.bin"), "wb") as f:
        f.write(moe.bank.to_bytes())
    with open(os.path.join(path, "gate.bin"), "wb") as f:
        f.write(moe.gate.to_bytes())
    filt = moe.density_filter
    if filt is not None:
        with open(os.path.join(path, "density_filter.bin"), "wb") as f:
            f.write(filt.grid.to_bytes())
    with open(os.path.join(path, "moe.json"), "w") as f:
        json.dump({"k": moe.k, "threshold": None if filt is None else filt.threshold}, f)


def load_moe(path: str) -> MixtureOfExperts:
    from .grid import VoxelGrid

    meta_path = os.path.join(path, "moe.json")
    if not os.path.exists(meta_path):
        raise FileNotFoundError(f"no MoE checkpoint at {path}")
    with open(meta_path) as f:
        meta = json.load(f)
    with open(os.path.join(path, "experts.bin"), "rb") as f:
        bank = ExpertBank.from_bytes(f.read())
    with open(os.path.join(path, "gate.bin"), "rb") as f:
        gate = Gate.from_bytes(f.read())
    filt = None
    if meta["threshold"] is not None:
        with open(os.path.join(path, "density_filter.bin"), "rb") as f:
            filt = DensityFilter(VoxelGrid.from_bytes(f.read(), requires_grad=False), meta["threshold"])
    return MixtureOfExperts(bank, gate, filt, meta["k"])
