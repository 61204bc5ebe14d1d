import dataclasses

import numpy as np
import pytest

from moefield import autodiff as ad
from moefield.autodiff import Tensor
from moefield.experts import build_bank
from moefield.gate import gate_for
from moefield.losses import photometric_loss
from moefield.metrics import psnr
from moefield.optim import Adam
from moefield.render import FieldOutput, expert_field, render_image, render_rays
from moefield.scene import get_scene, make_dataset
from moefield.trainer import (MoETrainer, RayBatcher, TrainConfig, build_moe, load_moe,
                              pretrain_experts, run_pipeline, save_moe, train_moe)


@pytest.fixture(scope="module")
def sphere_data():
    return make_dataset(get_scene("one-sphere"), 8, 2, 16, 16, seed=0)


def small_config(**kw):
    base = dict(M=3, k=2, pretrain_iters=0, joint_iters=0, batch_rays=128, n_samples=24,
                base_resolution=6, gate_resolution=4, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


def snapshot(params):
    return [p.data.copy() for p in params]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(M=3, k=4).validate()
    with pytest.raises(ValueError):
        TrainConfig(penalty="cubic").validate()
    with pytest.raises(ValueError):
        TrainConfig(M=2).validate()
    TrainConfig().validate()


def test_zero_iterations_leave_everything_unchanged(sphere_data):
    cfg = small_config()
    bank = build_bank(6, 3, 0)
    before = snapshot(bank.parameters())
    pretrain_experts(bank, sphere_data, cfg)
    gate = gate_for(bank, 4)
    gbefore = snapshot(gate.parameters())
    bank, gate, report = train_moe(bank, gate, sphere_data, cfg)
    for a, p in zip(before + gbefore, bank.parameters() + gate.parameters()):
        assert np.array_equal(a, p.data)
    assert report.l_tot == []


def train_psnr(expert, data):
    cams, imgs = data.split("train")
    with ad.no_grad():
        return np.mean([psnr(render_image(expert_field(expert), c, 24), im) for c, im in zip(cams, imgs)])


def test_pretraining_improves_every_expert_and_never_touches_gate(sphere_data):
    cfg = small_config(pretrain_iters=200, base_resolution=6)
    bank = build_bank(6, 3, 0)
    gate = gate_for(bank, 4)
    gbefore = snapshot(gate.parameters())
    init = [train_psnr(e, sphere_data) for e in bank]
    pretrain_experts(bank, sphere_data, cfg)
    after = [train_psnr(e, sphere_data) for e in bank]
    assert all(b > a for a, b in zip(init, after)), (init, after)
    for a, p in zip(gbefore, gate.parameters()):
        assert np.array_equal(a, p.data) and p.grad is None


def test_pretraining_deterministic(sphere_data):
    cfg = small_config(pretrain_iters=5)
    a, b = build_bank(6, 3, 4), build_bank(6, 3, 4)
    pretrain_experts(a, sphere_data, cfg)
    pretrain_experts(b, sphere_data, cfg)
    for p, q in zip(a.parameters(), b.parameters()):
        assert np.array_equal(p.data, q.data)


def test_joint_training_calls_exactly_k_experts_per_kept_point(sphere_data):
    cfg = small_config(k=2, pretrain_iters=40, threshold=0.35)
    bank = build_bank(6, 3, 1)
    pretrain_experts(bank, sphere_data, cfg)
    trainer = MoETrainer(build_moe(bank, cfg), sphere_data, cfg)
    for _ in range(10):
        bank.reset_calls()
        o, d, rgb = trainer.batcher.sample(np.random.default_rng(0))
        _, _, _, info = trainer.loss(o, d, rgb)
        assert sum(bank.calls) == cfg.k * info.n_points
        assert 0 < info.n_points < info.keep.size


def test_ensemble_fine_tuning_matches_independent_trainer(sphere_data):
    """lambda = 0, k = M, frozen uniform gate: the MoE is plain ensemble averaging."""
    cfg = small_config(k=3, lam=0.0, threshold=0.0, freeze_gate=True, seed=3)
    bank = build_bank(6, 3, 3)
    ref_bank = bank.copy()
    trainer = MoETrainer(build_moe(bank, cfg), sphere_data, cfg)
    trainer.run(8)

    # independent trainer: average the experts' outputs directly
    def averaged(p, d):
        parts = [e.query(p, d) for e in ref_bank]
        sig = ad.mul(ad.add(ad.add(parts[0][0], parts[1][0]), parts[2][0]), 1.0 / 3.0)
        col = ad.mul(ad.add(ad.add(parts[0][1], parts[1][1]), parts[2][1]), 1.0 / 3.0)
        return FieldOutput(sig, col)

    grids = [p for e in ref_bank for p in e.grid_parameters()]
    mlps = [p for e in ref_bank for p in e.mlp_parameters()]
    opt = Adam([(grids, cfg.lr_grid), (mlps, cfg.lr_mlp)])
    rng = np.random.default_rng([cfg.seed, 2])
    batcher = RayBatcher(sphere_data, cfg.batch_rays)
    losses = []
    for _ in range(8):
        o, d, rgb = batcher.sample(rng)
        loss = photometric_loss(render_rays(averaged, o, d, cfg.n_samples, rng).rgb, rgb)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        losses.append(loss.item())
    np.testing.assert_allclose(trainer.report.l_nerf, losses, rtol=1e-9)


def test_smoke_loss_decreases(sphere_data):
    drops = []
    for seed in range(5):
        cfg = small_config(k=1, seed=seed, pretrain_iters=0, joint_iters=50)
        moe, report = run_pipeline(sphere_data, cfg)
        assert np.all(np.isfinite(report.l_tot)) and len(report.l_tot) == 50
        drops.append(np.mean(report.l_tot[:5]) - np.mean(report.l_tot[-5:]))
    assert np.median(drops) > 0


def test_checkpoint_resume_reproduces_next_step(sphere_data, tmp_path):
    cfg = small_config(k=1, pretrain_iters=5, seed=2)
    moe, _ = run_pipeline(sphere_data, dataclasses.replace(cfg, joint_iters=0))
    trainer = MoETrainer(moe, sphere_data, cfg)
    trainer.run(3)
    trainer.save(str(tmp_path))
    nxt = trainer.step()
    resumed = MoETrainer.resume(str(tmp_path), sphere_data)
    assert resumed.iteration == 3
    assert resumed.step() == nxt


def test_moe_save_load_roundtrip(tmp_path):
    cfg = small_config(threshold=0.01)
    bank = build_bank(6, 3, 0)
    moe = build_moe(bank, cfg)
    save_moe(moe, str(tmp_path))
    back = load_moe(str(tmp_path))
    assert back.k == moe.k and back.density_filter.threshold == 0.01
    for p, q in zip(moe.parameters(), back.parameters()):
        assert np.array_equal(p.data, q.data)
    with pytest.raises(FileNotFoundError):
        load_moe(str(tmp_path / "missing"))


def test_report_csv(sphere_data):
    cfg = small_config(k=1, joint_iters=3)
    _, report = run_pipeline(sphere_data, cfg)
    lines = report.to_csv().strip().splitlines()
    assert lines[0] == "iteration,l_nerf,l_rw_aux,l_tot,dispatch_frac_0,dispatch_frac_1,dispatch_frac_2"
    assert len(lines) == 4


def test_nan_guard(sphere_data):
    cfg = small_config(k=1, joint_iters=1)
    bank = build_bank(6, 3, 0)
    for e in bank:
        e.features.values.data[...] = np.nan
    with pytest.raises(FloatingPointError):
        MoETrainer(build_moe(bank, dataclasses.replace(cfg, threshold=0.0)), sphere_data, cfg).step()
