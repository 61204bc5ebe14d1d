import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moefield import autodiff as ad
from moefield.experts import build_bank
from moefield.gate import Gate, gate_for, gate_probs
from moefield.grid import VoxelGrid


def test_zero_last_layer_gives_uniform():
    g = gate_for(4, 8, seed=3)
    p = g.probs(np.random.default_rng(0).uniform(size=(50, 3))).data
    np.testing.assert_allclose(p, 0.25, atol=1e-15)


def test_logits_ln2_0_0():
    g = gate_for(3, 4, seed=0)
    g.mlp.biases[-1].data[...] = [np.log(2), 0.0, 0.0]
    p = gate_probs(g, np.array([0.3, 0.4, 0.5])).data
    e = np.exp([np.log(2), 0.0, 0.0])
    np.testing.assert_allclose(p, e / e.sum(), atol=1e-15)
    np.testing.assert_allclose(p, [0.5, 0.25, 0.25], atol=1e-15)


def test_probs0_gradient_wrt_grid():
    rng = np.random.default_rng(5)
    g = gate_for(3, 4, seed=1)
    for p in g.mlp.parameters():
        p.data[...] = rng.normal(scale=0.5, size=p.shape)
    x = np.array([[0.31, 0.52, 0.77]])
    ad.backward(ad.sum(ad.take_along_rows(g.probs(x), np.zeros((1, 1), dtype=int))))
    analytic = g.grid.values.grad
    base = g.grid.values.data.copy()
    num = np.zeros_like(base)
    h = 1e-4
    # only the 8 surrounding nodes matter; check those and that the rest are zero
    touched = np.argwhere(np.abs(analytic) > 0)
    for idx in map(tuple, touched):
        vals = []
        for sgn in (1, -1):
            g.grid.values.data[...] = base
            g.grid.values.data[idx] += sgn * h
            with ad.no_grad():
                vals.append(g.probs(x).data[0, 0])
        num[idx] = (vals[0] - vals[1]) / (2 * h)
    g.grid.values.data[...] = base
    assert len({tuple(i[:3]) for i in touched}) <= 8
    assert np.linalg.norm(analytic - num) / np.linalg.norm(num) < 1e-4


def test_gate_for_sizes():
    bank = build_bank(8, 5, seed=0)
    g = gate_for(bank, 8)
    assert g.mlp.sizes == [8, 64, 64, 5]
    assert g.grid.size == 8 ** 3 * 8 == 4096
    assert gate_for(3).resolution == (16, 16, 16)
    with pytest.raises(ValueError):
        gate_for(3, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_probs_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    for dt, tol in ((np.float64, 1e-12), (np.float32, 1e-6)):
        g = gate_for(3, 4, seed=seed, dtype=dt)
        for p in g.mlp.parameters():
            p.data[...] = rng.normal(size=p.shape)
        s = g.probs(rng.uniform(size=(20, 3))).data.sum(axis=1)
        np.testing.assert_allclose(s, 1.0, atol=tol)


def test_probs_continuous():
    rng = np.random.default_rng(2)
    g = gate_for(3, 6, seed=2)
    for p in g.mlp.parameters():
        p.data[...] = rng.normal(size=p.shape)
    x = rng.uniform(0.1, 0.9, size=(20, 3))
    for eps in (1e-4, 1e-6):
        d = np.abs(g.probs(x + eps).data - g.probs(x).data).max()
        assert d < 1e3 * eps


def test_zero_grid_gives_constant_probs():
    rng = np.random.default_rng(3)
    g = gate_for(4, 5, seed=0)
    g.grid.values.data[...] = 0.0
    for p in g.mlp.parameters():
        p.data[...] = rng.normal(size=p.shape)
    p = g.probs(rng.uniform(size=(30, 3))).data
    np.testing.assert_allclose(p, np.broadcast_to(p[0], p.shape), atol=1e-15)


def test_gate_roundtrip():
    g = gate_for(3, 4, seed=9, dtype=np.float32)
    back = Gate.from_bytes(g.to_bytes())
    for p, q in zip(g.parameters(), back.parameters()):
        assert np.array_equal(p.data, q.data)
    with pytest.raises(ValueError):
        Gate.from_bytes(b"XXXX")


def test_gate_rejects_mismatched_mlp():
    from moefield.nn import MLP

    with pytest.raises(ValueError):
        Gate(VoxelGrid(np.zeros((4, 4, 4, 8))), MLP.init([5, 4, 3], np.random.default_rng(0)))
