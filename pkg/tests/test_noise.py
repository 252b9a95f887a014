import numpy as np
import pytest

from dne.noise import NoiseField, inference_noise, noise_scale, normal_stream, reparam, sample, sample_gradient
from dne.nn import central_difference, relative_error


def field(mu2, mu3, **kw):
    return NoiseField(np.asarray(mu2, dtype=float), np.asarray(mu3, dtype=float), **kw)


def test_zero_mean_std_is_delta():
    f = field(np.zeros((100_000, 1)), np.zeros((1, 3)), gamma=0.1, delta=0.01)
    s = sample(f, 3)
    assert 0.0097 <= s.eps_2d.std() <= 0.0103


def test_moments_match_parameters():
    f = field(np.ones((100_000, 1)), np.ones((1, 3)), gamma=0.5, delta=0.1)
    e = sample(f, 11).eps_2d
    assert abs(e.mean() - 1.0) < 0.01
    assert abs(e.std() / 0.6 - 1.0) < 0.01


def test_sample_deterministic():
    f = field(np.random.default_rng(0).normal(size=(10, 2)), np.zeros((10, 3)))
    a, b = sample(f, 5), sample(f, 5)
    assert np.array_equal(a.eps_2d, b.eps_2d) and np.array_equal(a.eps_3d, b.eps_3d)
    assert a.z_2d.shape == (10, 2) and a.z_3d.shape == (10, 3)


def test_seeds_decorrelated():
    f = field(np.zeros((10_000, 1)), np.zeros((1, 3)))
    a, b = sample(f, 1).z_2d.ravel(), sample(f, 2).z_2d.ravel()
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.05


def test_streams_independent_of_order():
    first = normal_stream(9, 2, 3, shape=(5,))
    normal_stream(9, 0, 0, shape=(1000,))
    assert np.array_equal(normal_stream(9, 2, 3, shape=(5,)), first)
    assert not np.array_equal(normal_stream(9, 2, 4, shape=(5,)), first)


def test_inference_is_mean():
    rng = np.random.default_rng(1)
    mu3 = np.zeros((5, 3))
    mu3[2] = [0.1, 0.2, 0.3]
    f = field(rng.normal(size=(5, 2)), mu3)
    s = inference_noise(f)
    assert np.array_equal(s.eps_2d, f.mu_2d)
    assert np.array_equal(s.eps_3d[2], [0.1, 0.2, 0.3])
    assert not s.z_2d.any() and not s.z_3d.any()
    z = inference_noise(field(np.zeros((3, 2)), np.zeros((3, 3))))
    assert not z.eps_2d.any() and not z.eps_3d.any()


def test_validation():
    with pytest.raises(ValueError):
        field(np.zeros((2, 2)), np.zeros((2, 3)), gamma=0.0)
    with pytest.raises(ValueError):
        field(np.zeros((2, 2)), np.zeros((2, 3)), delta=-1.0)
    with pytest.raises(ValueError):
        field(np.full((2, 2), np.inf), np.zeros((2, 3)))


def test_scale_floor():
    mu = np.random.default_rng(2).normal(size=1000)
    assert np.all(noise_scale(mu, 0.1, 1e-3) >= 1e-3)


def test_gradient_small_gamma_is_upstream():
    rng = np.random.default_rng(3)
    f = field(rng.normal(size=(4, 2)), rng.normal(size=(4, 3)), gamma=1e-12)
    s = sample(f, 0)
    up2, up3 = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
    g2, g3 = sample_gradient(f, s, up2, up3)
    assert np.allclose(g2, up2, atol=1e-10) and np.allclose(g3, up3, atol=1e-10)


def test_gradient_at_zero_mean_is_one():
    f = field(np.zeros((3, 2)), np.zeros((3, 3)), gamma=0.7)
    s = sample(f, 4)
    g2, g3 = sample_gradient(f, s, np.ones((3, 2)), np.ones((3, 3)))
    assert np.array_equal(g2, np.ones((3, 2))) and np.array_equal(g3, np.ones((3, 3)))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    mu = rng.normal(size=(6, 3))
    mu[np.abs(mu) < 0.1] = 0.5
    w = rng.normal(size=mu.shape)
    f = field(np.zeros((6, 2)), mu, gamma=0.3, delta=0.01)
    s = sample(f, 0)
    _, g = sample_gradient(f, s, np.zeros((6, 2)), w)
    for idx in np.ndindex(*mu.shape):
        fd, _ = central_difference(lambda: float(np.sum(w * reparam(mu, s.z_3d, 0.3, 0.01))), mu, idx, 1e-6)
        assert relative_error(g[idx], fd) < 1e-6


def test_separate_pixel_margin():
    f = field(np.zeros((50_000, 2)), np.zeros((1, 3)), delta=1e-3, delta_2d=0.5)
    assert f.margin_2d == 0.5
    assert abs(sample(f, 8).eps_2d.std() / 0.5 - 1) < 0.02
