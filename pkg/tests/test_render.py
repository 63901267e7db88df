"""Volume integration: weights, transmittance, sampling, pixel rendering."""

import numpy as np
import pytest

from prtgrad import field as fm
from prtgrad import render as vr
from prtgrad.errors import InvalidInputError

TINY = fm.ArchConfig(depth=2, width=16, skip_layer=0, head_width=8, l_pos=2, l_dir=1)


def _ray(near=0.0, far=1.0):
    return vr.Ray(origin=np.zeros(3), direction=np.array([0.0, 0.0, 1.0]),
                  t_near=near, t_far=far)


def test_ray_invariants():
    with pytest.raises(InvalidInputError):
        vr.Ray(origin=np.zeros(3), direction=np.array([0, 0, 1.0]), t_near=2.0, t_far=1.0)
    with pytest.raises(InvalidInputError):
        vr.Ray(origin=np.zeros(3), direction=np.array([0, 0, 2.0]), t_near=0.0, t_far=1.0)


def test_stratified_bin_centers():
    s = vr.sample_stratified(_ray(), 2, rng=None)
    assert np.allclose(s.depths, [0.25, 0.75])
    assert np.allclose(s.deltas, [0.5, 0.25])  # last segment capped at t_far


def test_stratified_samples_stay_in_bounds():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        near = rng.uniform(0, 5)
        far = near + rng.uniform(0.1, 10)
        s = vr.sample_stratified(_ray(near, far), 8, rng)
        assert np.all(s.depths >= near) and np.all(s.depths < far)
        assert np.all(np.diff(s.depths) > 0)
        assert np.all(s.deltas > 0)


def test_stratified_deterministic_given_seed():
    a = vr.sample_stratified(_ray(), 16, np.random.default_rng(5))
    b = vr.sample_stratified(_ray(), 16, np.random.default_rng(5))
    assert np.array_equal(a.depths, b.depths)


def test_weights_empty_space():
    p = vr.compute_weights(np.zeros(3), np.ones(3))
    assert np.array_equal(p.weights, np.zeros(3))
    assert p.residual == 1.0
    assert np.array_equal(p.transmittances, np.ones(3))


def test_weights_closed_form_single_sample():
    p = vr.compute_weights(np.array([1.0]), np.array([np.log(2)]))
    assert np.allclose(p.weights, [0.5], rtol=1e-12)


def test_weights_closed_form_two_samples():
    p = vr.compute_weights(np.array([1.0, 1.0]), np.array([np.log(2), np.log(2)]))
    assert np.allclose(p.weights, [0.5, 0.25], rtol=1e-12)
    assert np.isclose(p.weights.sum(), 1.0 - np.exp(-2 * np.log(2)), rtol=1e-12)


def test_weights_reject_negative_inputs():
    with pytest.raises(InvalidInputError):
        vr.compute_weights(np.array([-0.1]), np.array([1.0]))
    with pytest.raises(InvalidInputError):
        vr.compute_weights(np.array([0.1]), np.array([0.0]))


def test_weight_conservation_and_monotonicity_sweep():
    rng = np.random.default_rng(1)
    for _ in range(500):
        n = rng.integers(1, 50)
        sigma = rng.exponential(1.0, n)
        delta = rng.uniform(0.01, 0.5, n)
        p = vr.compute_weights(sigma, delta)
        assert abs(p.weights.sum() + p.residual - 1.0) < 1e-6
        assert np.all(np.diff(p.transmittances) <= 1e-15)
        assert p.transmittances[0] == 1.0
        assert np.all((p.weights >= 0) & (p.weights <= 1))


def test_refinement_consistency():
    # splitting any segment in two with the same sigma keeps sum(w) unchanged
    sigma = np.array([0.5, 2.0, 1.0])
    delta = np.array([0.3, 0.4, 0.2])
    base = vr.compute_weights(sigma, delta).weights.sum()
    for i in range(3):
        s2 = np.insert(sigma, i, sigma[i])
        d2 = delta.copy()
        d2[i] /= 2
        d2 = np.insert(d2, i, delta[i] / 2)
        split = vr.compute_weights(s2, d2).weights.sum()
        assert abs(split - base) < 1e-9 * max(abs(base), 1)


def test_integrate_transfer_arithmetic():
    p = vr.WeightProfile(weights=np.array([0.5, 0.25]),
                         transmittances=np.array([1.0, 0.5]), residual=0.25)
    out = vr.integrate_transfer(p, np.array([[1.0, 1, 1], [2.0, 2, 2]]))
    assert np.allclose(out, [1.0, 1.0, 1.0], rtol=0, atol=0)


def test_integrate_transfer_zero_weights():
    p = vr.compute_weights(np.zeros(4), np.ones(4))
    out = vr.integrate_transfer(p, np.ones((4, 3)))
    assert np.array_equal(out, np.zeros(3))


def test_integrate_transfer_matches_dot_product_oracle():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = rng.integers(1, 20)
        sigma = rng.exponential(1.0, n)
        delta = rng.uniform(0.01, 0.5, n)
        p = vr.compute_weights(sigma, delta)
        h = rng.uniform(0, 3, (n, 3))
        got = vr.integrate_transfer(p, h)
        # independent per-channel scalar products
        expect = np.array([float(np.dot(p.weights, h[:, c])) for c in range(3)])
        denom = np.maximum(np.abs(expect), 1e-300)
        assert np.all(np.abs(got - expect) / denom < 1e-12)


def test_integrate_transfer_length_mismatch():
    p = vr.compute_weights(np.ones(3), np.ones(3))
    with pytest.raises(InvalidInputError):
        vr.integrate_transfer(p, np.ones((4, 3)))


def test_integrate_linearity_in_h():
    rng = np.random.default_rng(3)
    p = vr.compute_weights(rng.exponential(1.0, 16), rng.uniform(0.01, 0.3, 16))
    h1 = rng.uniform(0, 2, (16, 3))
    h2 = rng.uniform(0, 2, (16, 3))
    a, b = 0.7, -1.3
    lhs = vr.integrate_transfer(p, a * h1 + b * h2)
    rhs = a * vr.integrate_transfer(p, h1) + b * vr.integrate_transfer(p, h2)
    assert np.all(np.abs(lhs - rhs) <= 1e-9 * np.maximum(np.abs(rhs), 1e-12))


def test_hierarchical_concentrated_weights():
    ray = _ray(0.0, 1.0)
    coarse = vr.sample_stratified(ray, 10, rng=None)
    weights = np.zeros(10)
    weights[4] = 1.0
    profile = vr.WeightProfile(weights=weights, transmittances=np.ones(10), residual=0.0)
    rng = np.random.default_rng(0)
    lo, hi = coarse.depths[4], coarse.depths[4] + coarse.deltas[4]
    inside = 0
    total = 0
    for _ in range(50):
        s = vr.sample_hierarchical(ray, coarse.depths, profile, 20, rng)
        new = np.setdiff1d(s.depths, coarse.depths)
        inside += np.sum((new >= lo) & (new <= hi))
        total += new.size
    assert inside / total >= 0.90


def test_hierarchical_uniform_weights_uniform_histogram():
    ray = _ray(0.0, 1.0)
    coarse = vr.sample_stratified(ray, 8, rng=None)
    profile = vr.WeightProfile(weights=np.full(8, 0.1), transmittances=np.ones(8),
                               residual=0.2)
    rng = np.random.default_rng(1)
    draws = []
    for _ in range(1000):
        s = vr.sample_hierarchical(ray, coarse.depths, profile, 8, rng)
        draws.append(np.setdiff1d(s.depths, coarse.depths))
    draws = np.concatenate(draws)
    edges = np.concatenate([coarse.depths, [1.0]])
    counts, _ = np.histogram(draws, bins=edges)
    n, k = draws.size, 8
    expect = n / k
    sd = np.sqrt(n * (1 / k) * (1 - 1 / k))
    assert np.all(np.abs(counts - expect) < 3 * sd)


def test_hierarchical_merged_strictly_increasing():
    ray = _ray(0.0, 2.0)
    rng = np.random.default_rng(2)
    coarse = vr.sample_stratified(ray, 16, rng)
    profile = vr.compute_weights(rng.exponential(1.0, 16), coarse.deltas)
    s = vr.sample_hierarchical(ray, coarse.depths, profile, 16, rng)
    assert np.all(np.diff(s.depths) > 0)
    assert s.depths.shape == (32,)


def test_render_pixel_zero_density_field_is_black():
    params = fm.init_params(0, TINY)
    for level in ("coarse", "fine"):
        params.tensors[f"{level}.density.out.W"][:] = 0
        params.tensors[f"{level}.density.out.b"][:] = -40.0  # softplus(-40) ~ 4e-18
    ray = vr.Ray(origin=np.array([0.0, 0, -4]), direction=np.array([0.0, 0, 1]),
                 t_near=2.0, t_far=6.0)
    coarse, fine = vr.render_pixel(params, ray, np.array([0.0, 0, 1]),
                                   vr.RenderConfig(n_coarse=8, n_fine=8))
    assert np.all(np.abs(coarse) < 1e-12)
    assert np.all(np.abs(fine) < 1e-12)


def test_render_pixel_deterministic_given_seed():
    params = fm.init_params(1, TINY)
    ray = vr.Ray(origin=np.array([0.0, 0, -4]), direction=np.array([0.0, 0, 1]),
                 t_near=2.0, t_far=6.0)
    cfg = vr.RenderConfig(n_coarse=8, n_fine=8, seed=9)
    a = vr.render_pixel(params, ray, np.array([0.0, 0, 1]), cfg)
    b = vr.render_pixel(params, ray, np.array([0.0, 0, 1]), cfg)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_render_pixel_rejects_bad_light():
    params = fm.init_params(1, TINY)
    with pytest.raises(InvalidInputError):
        vr.render_pixel(params, _ray(0.1, 1.0), np.array([0.0, 0, 2.0]),
                        vr.RenderConfig(n_coarse=4, n_fine=4))


def test_render_image_chunking_consistent():
    from prtgrad.dataset import Camera

    params = fm.init_params(2, TINY)
    k = np.array([[20.0, 0, 8], [0, 20.0, 8], [0, 0, 1]])
    cam = Camera(name="c", K=k, R=np.eye(3), t=np.array([0.0, 0, 6.0]),
                 width=16, height=16)
    omega = np.array([0.0, 0, 1.0])
    imgs = []
    for rows in (16, 5):
        cfg = vr.RenderConfig(n_coarse=6, n_fine=6, seed=None, batch_rows=rows)
        imgs.append(vr.render_image(params, cam, omega, cfg, near=3.0, far=9.0))
    assert np.array_equal(imgs[0], imgs[1])
