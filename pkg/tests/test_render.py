import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moefield import autodiff as ad
from moefield.autodiff import Tensor
from moefield.render import (Camera, FieldOutput, Ray, composite, composite_samples, look_at,
                             ray_box, render_image, render_rays, sample_ray, sample_t)

from helpers import random_moe


def recursive_oracle(samples):
    """Front-to-back recursion C = sum T_i a_i c_i with T_{i+1} = T_i (1 - a_i)."""
    T, out = 1.0, np.zeros(3)
    for sigma, c, delta in samples:
        a = 1.0 - np.exp(-sigma * delta)
        out = out + T * a * np.asarray(c)
        T = T * (1.0 - a)
    return out


def random_samples(rng, n):
    return [(rng.uniform(0, 20) * rng.integers(0, 2), rng.uniform(size=3), rng.uniform(0.001, 0.2))
            for _ in range(n)]


def test_composite_matches_recursive_definition():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        s = random_samples(rng, int(rng.integers(1, 40)))
        worst = max(worst, np.abs(composite_samples(s) - recursive_oracle(s)).max())
    assert worst < 1e-12


def test_two_sample_hand_case():
    c1, c2 = np.array([1.0, 0.2, 0.0]), np.array([0.0, 0.4, 1.0])
    out = composite_samples([(np.log(2), c1, 1.0), (np.log(2), c2, 1.0)])
    np.testing.assert_allclose(out, 0.5 * c1 + 0.25 * c2, atol=1e-15)


def test_empty_space_and_opaque_front():
    assert np.all(composite_samples([(0.0, np.ones(3), 0.5)] * 4) == 0)
    c = np.array([0.3, 0.6, 0.9])
    out = composite_samples([(1e4, c, 1.0), (5.0, np.ones(3), 1.0)])
    np.testing.assert_allclose(out, c, atol=1e-15)
    assert np.all(composite_samples([]) == 0)


def test_weights_form_subprobability():
    rng = np.random.default_rng(1)
    sig = rng.uniform(0, 50, size=(100, 32))
    _, w = composite(sig, rng.uniform(size=(100, 32, 3)), rng.uniform(0, 0.1, size=(100, 32)))
    assert np.all(w >= 0) and np.all(w.sum(axis=1) <= 1 + 1e-12)


def test_order_matters():
    s = [(2.0, np.array([1.0, 0, 0]), 0.5), (2.0, np.array([0, 0, 1.0]), 0.5)]
    assert not np.allclose(composite_samples(s), composite_samples(s[::-1]))


def test_zero_density_slot_is_transparent():
    rng = np.random.default_rng(2)
    s = random_samples(rng, 10)
    s[4] = (0.0, s[4][1], s[4][2])
    blanked = list(s)
    blanked[4] = (0.0, np.zeros(3), s[4][2])
    assert np.array_equal(composite_samples(s), composite_samples(blanked))


def test_composite_shape_errors():
    with pytest.raises(ValueError):
        composite(np.ones((2, 3)), np.ones((2, 3, 3)), np.ones((2, 4)))


def test_sample_ray_uniform_partition():
    r = sample_ray(Ray(np.zeros(3), np.array([1.0, 0, 0]), 0.0, 1.0), 2)
    np.testing.assert_allclose(r.t, [0.0, 0.5])
    np.testing.assert_allclose(r.deltas, [0.5, 0.5])
    np.testing.assert_allclose(r.positions[:, 0], [0.0, 0.5])


def test_stratified_determinism_and_bounds():
    ray = Ray(np.zeros(3), np.array([0, 1.0, 0]), 0.3, 1.7)
    a = sample_ray(ray, 16, stratified=True, seed=5)
    b = sample_ray(ray, 16, stratified=True, seed=5)
    assert np.array_equal(a.t, b.t)
    assert np.all((a.t >= 0.3) & (a.t <= 1.7)) and np.all(np.diff(a.t) >= 0)
    assert a.deltas.sum() <= 1.4 + 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 5), st.floats(0.01, 5), st.integers(2, 64), st.integers(0, 1000))
def test_sample_t_within_interval(tn, span, n, seed):
    t, d = sample_t(tn, tn + span, n, np.random.default_rng(seed))
    assert np.all(t >= tn) and np.all(t <= tn + span + 1e-12) and np.all(d >= 0)


def test_sample_t_needs_two():
    with pytest.raises(ValueError):
        sample_t(0.0, 1.0, 1)


def test_ray_validation():
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0]), 0, 1)
    with pytest.raises(ValueError):
        Ray(np.zeros(3), np.array([1.0, 0, 0]), 1, 1)


def test_ray_box():
    o = np.array([[-1.0, 0.5, 0.5], [-1.0, 2.0, 0.5], [0.5, 0.5, 0.5]])
    d = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 0, 1.0]])
    tn, tf, hit = ray_box(o, d)
    assert list(hit) == [True, False, True]
    np.testing.assert_allclose(tn, [1.0, 0.0, 0.0])
    np.testing.assert_allclose(tf, [2.0, 0.0, 0.5])


def test_camera_centre_ray_points_at_target():
    eye, target = np.array([2.0, 1.0, 1.5]), np.array([0.5, 0.5, 0.5])
    cam = Camera(look_at(eye, target), 40.0, 8, 8)
    o, d = cam.pixel_rays(np.array([[3.5, 3.5]]))  # pixel centre (4, 4) is the principal point
    want = (target - eye) / np.linalg.norm(target - eye)
    np.testing.assert_allclose(d[0], want, atol=1e-12)
    np.testing.assert_allclose(o[0], eye)
    o, d = cam.rays()
    assert o.shape == (64, 3) and np.allclose(np.linalg.norm(d, axis=1), 1)
    with pytest.raises(ValueError):
        Camera(np.diag([2.0, 1, 1, 1]), 1.0, 4, 4)


def test_empty_field_renders_black():
    def empty(p, d):
        return FieldOutput(Tensor(np.zeros((p.shape[0], 1))), Tensor(np.full((p.shape[0], 3), 0.7)))

    cam = Camera(look_at([0.5, 0.5, 2.5], [0.5, 0.5, 0.5], up=(0, 1, 0)), 10.0, 6, 6)
    assert np.all(render_image(empty, cam, 16) == 0)


def test_missing_rays_are_black_and_differentiable():
    moe = random_moe(0)
    o = np.array([[-1.0, 0.5, 0.5], [-1.0, 5.0, 0.5]])
    d = np.array([[1.0, 0, 0], [1.0, 0, 0]])
    res = render_rays(moe, o, d, 8)
    assert list(res.hit) == [True, False]
    assert np.all(res.rgb.data[1] == 0) and np.any(res.rgb.data[0] != 0)
    ad.backward(ad.sum(res.rgb))


def test_uniform_topM_matches_ensemble_renderer():
    from moefield.moe import ensemble_moe

    moe = ensemble_moe(random_moe(4))
    cam = Camera(look_at([1.8, 0.4, 1.2], [0.5, 0.5, 0.5]), 12.0, 8, 8)
    img = render_image(moe, cam, 24)

    def averaged(p, d):
        parts = [e.query(p, d) for e in moe.bank]
        sig = sum(s.data for s, _ in parts) / len(parts)
        col = sum(c.data for _, c in parts) / len(parts)
        return FieldOutput(Tensor(sig), Tensor(col))

    np.testing.assert_allclose(img, render_image(averaged, cam, 24), atol=1e-6)


def test_render_deterministic():
    moe = random_moe(2)
    cam = Camera(look_at([1.8, 0.4, 1.2], [0.5, 0.5, 0.5]), 12.0, 6, 6)
    assert np.array_equal(render_image(moe, cam, 16), render_image(moe, cam, 16))
