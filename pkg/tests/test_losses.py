import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moefield import autodiff as ad
from moefield.autodiff import Tensor
from moefield.losses import (BatchRoutingStats, PenaltySchedule, aux_loss, penalty_weights,
                             photometric_loss, rw_aux_loss, total_loss)
from moefield.moe import topk_indices


def test_photometric_examples():
    x = np.random.default_rng(0).uniform(size=(5, 3))
    assert photometric_loss(x, x).item() == 0.0
    assert photometric_loss(np.array([[0.6, 0.2, 0.2]]), np.array([[0.5, 0.2, 0.2]])).item() == pytest.approx(0.01, abs=1e-15)


def test_photometric_matches_double_loop():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(17, 3)), rng.uniform(size=(17, 3))
    total = 0.0
    for r in range(17):
        for ch in range(3):
            total += (a[r, ch] - b[r, ch]) ** 2
    assert photometric_loss(a, b).item() == pytest.approx(total / 17, abs=1e-12)
    with pytest.raises(ValueError):
        photometric_loss(a, b[:5])


def balanced(M, B):
    return BatchRoutingStats.from_arrays(np.full(M, B / M), np.full(M, B / M), B)


def collapsed(M, B):
    c = np.zeros(M)
    c[0] = B
    return BatchRoutingStats.from_arrays(c, c.copy(), B)


@pytest.mark.parametrize("M", [3, 4, 5])
def test_aux_bounds(M):
    assert abs(aux_loss(balanced(M, 60)).item() - 1.0) <= 1e-9
    assert abs(aux_loss(collapsed(M, 60)).item() - M) <= 1e-9


def test_aux_hand_case():
    st_ = BatchRoutingStats.from_arrays([3, 1], [2.5, 1.5], 4)
    assert aux_loss(st_).item() == pytest.approx((2 / 16) * (7.5 + 1.5), abs=1e-15) == 1.125


def test_geometric_weights_m5():
    w = penalty_weights("geometric", 5)
    ref = [float(mpmath.power(5, mpmath.mpf(i) / 4)) for i in range(5)]
    np.testing.assert_allclose(w, ref, rtol=0, atol=1e-12)
    np.testing.assert_allclose(w, [1, 1.49535, 2.23607, 3.34370, 5], atol=1e-5)
    assert rw_aux_loss(balanced(5, 50), PenaltySchedule.make("geometric", 5)).item() == pytest.approx(np.mean(ref), abs=1e-12)
    assert np.mean(ref) == pytest.approx(2.615, abs=1e-3)


@pytest.mark.parametrize("M", [3, 4, 5])
def test_geometric_endpoints_exact(M):
    w = penalty_weights("geometric", M)
    assert w[0] == 1.0 and w[-1] == float(M)
    with mpmath.workdps(50):
        ref = [mpmath.power(M, mpmath.mpf(i) / (M - 1)) for i in range(M)]
    np.testing.assert_allclose(w, [float(r) for r in ref], rtol=0, atol=1e-12)


def test_other_schedules():
    np.testing.assert_array_equal(penalty_weights("none", 4), [1, 1, 1, 1])
    np.testing.assert_array_equal(penalty_weights("linear", 4), [1, 2, 3, 4])
    np.testing.assert_array_equal(penalty_weights("quadratic", 4), [1, 2, 4, 8])
    with pytest.raises(ValueError):
        penalty_weights("cubic", 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6), st.integers(1, 40))
def test_none_schedule_bit_identical(seed, M, B):
    rng = np.random.default_rng(seed)
    stats = BatchRoutingStats.from_arrays(rng.integers(0, B + 1, size=M), rng.uniform(0, B, size=M), B)
    assert rw_aux_loss(stats, PenaltySchedule.make("none", M)).item() == aux_loss(stats).item()


def test_aux_bounds_for_top1_routing():
    """Each routed point has p_i >= 1/M, so m_i >= c_i / M and L_aux >= 1/M; L_aux <= M always.

    The balanced value 1 is not a lower bound: see the hand case below.
    """
    rng = np.random.default_rng(2)
    lo, hi = np.inf, -np.inf
    for _ in range(1000):
        M, B = int(rng.integers(2, 6)), int(rng.integers(1, 64))
        probs = ad.softmax_rows(rng.normal(scale=rng.uniform(0.1, 5), size=(B, M)))
        v = aux_loss(BatchRoutingStats.from_routing(probs, topk_indices(probs.data, 1), M)).item()
        lo, hi = min(lo, v * M), max(hi, v / M)
    assert lo >= 1 - 1e-12 and hi <= 1 + 1e-12


def test_aux_can_fall_below_one():
    probs = Tensor(np.array([[0.6, 0.4], [0.6, 0.4], [0.1, 0.9]]))
    v = aux_loss(BatchRoutingStats.from_routing(probs, topk_indices(probs.data, 1), 2)).item()
    assert v == pytest.approx((2 / 9) * (2 * 1.3 + 1 * 1.7), abs=1e-15)
    assert v < 1


def test_schedule_length_mismatch_and_empty_batch():
    with pytest.raises(ValueError):
        rw_aux_loss(balanced(3, 9), PenaltySchedule.make("geometric", 4))
    empty = BatchRoutingStats.from_routing(None, np.zeros((0, 1), dtype=int), 3)
    assert aux_loss(empty).item() == 0.0


def test_total_loss():
    assert total_loss(Tensor(0.7), Tensor(5.0), 0.0).item() == 0.7
    assert total_loss(Tensor(0.5), Tensor(2.0), 1e-3).item() == pytest.approx(0.502, abs=1e-15)
    a, b = Tensor(0.5, requires_grad=True), Tensor(2.0, requires_grad=True)
    ad.backward(total_loss(a, b, 0.25))
    h = 1e-6
    assert a.grad == pytest.approx((total_loss(Tensor(0.5 + h), b.data, 0.25).item() - total_loss(Tensor(0.5 - h), b.data, 0.25).item()) / (2 * h), abs=1e-8)
    assert b.grad == pytest.approx(0.25, abs=1e-15)


def test_rw_aux_gradient_reaches_gate_when_unbalanced():
    from moefield.gate import gate_for

    rng = np.random.default_rng(3)
    g = gate_for(3, 4, seed=0)
    g.mlp.weights[-1].data[...] = rng.normal(size=g.mlp.weights[-1].shape)
    probs = g.probs(rng.uniform(size=(32, 3)))
    stats = BatchRoutingStats.from_routing(probs, topk_indices(probs.data, 1), 3)
    assert len(set(stats.c)) > 1
    ad.backward(rw_aux_loss(stats, PenaltySchedule.make("geometric", 3)))
    assert any(np.any(p.grad) for p in g.parameters() if p.grad is not None)


def test_topk2_counts_each_selection():
    probs = Tensor(np.array([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3]]))
    st_ = BatchRoutingStats.from_routing(probs, topk_indices(probs.data, 2), 3)
    np.testing.assert_array_equal(st_.c, [1, 2, 1])
    assert st_.batch_size == 2
