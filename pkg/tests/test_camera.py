import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dne.camera import (Camera, RidgeConfig, correct_camera, fit_camera_array, fit_camera_backward,
                        project, projection_residual, ridge_objective)
from dne.nn import central_difference, relative_error
from dne.verify import ridge_oracle


def test_project_example():
    assert np.allclose(project([0.5, -0.2, 0.3], Camera(2, 2, 10, 20)), [11.0, 19.6], atol=1e-12)


def test_project_identity_and_depth_free():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(10, 3))
    assert np.array_equal(project(v, Camera(1, 1, 0, 0)), v[:, :2])
    w = v.copy()
    w[:, 2] = rng.normal(size=10)
    assert np.array_equal(project(w, Camera(3, 4, 5, 6)), project(v, Camera(3, 4, 5, 6)))


def test_project_batched():
    rng = np.random.default_rng(1)
    v = rng.normal(size=(3, 5, 3))
    c = rng.normal(size=(3, 4))
    out = project(v, c)
    for b in range(3):
        assert np.allclose(out[b], project(v[b], Camera.from_array(c[b])))


def test_camera_json_and_validation():
    c = Camera(1.5, -2.0, 3.25, 4.0)
    assert Camera.from_json(c.to_json()) == c
    with pytest.raises(ValueError):
        Camera(np.nan, 1, 0, 0)
    with pytest.raises(ValueError):
        RidgeConfig(-1e-3)


def test_exact_line_fit():
    v = np.array([[0.0, 0, 0], [1, 1, 0], [2, 3, 0]])
    u = np.array([[1.0, 0], [3, 1], [5, 2]])
    c = correct_camera(v, u, RidgeConfig(0.0))
    assert c.sx == 2.0 and c.tx == 1.0


def test_two_point_ridge_matches_oracle():
    v = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 0.0]])
    u = np.array([[0.0, 1.0], [1.0, -1.0]])
    got = correct_camera(v, u, RidgeConfig(0.1)).as_array()
    assert np.max(np.abs(got - ridge_oracle(v, u, 0.1))) < 1e-12


def test_known_camera_recovered():
    rng = np.random.default_rng(2)
    v = rng.normal(size=(50, 3))
    c = Camera(80.0, 75.0, 16.0, 15.5)
    assert np.allclose(correct_camera(v, project(v, c), RidgeConfig(0.0)).as_array(), c.as_array(), atol=1e-9)


def test_errors():
    with pytest.raises(ValueError, match="underdetermined"):
        correct_camera(np.zeros((1, 3)), np.zeros((1, 2)))
    v = np.array([[1.0, 0, 0], [1.0, 1, 0], [1.0, 2, 0]])
    with pytest.raises(np.linalg.LinAlgError, match="singular system"):
        correct_camera(v, np.zeros((3, 2)), RidgeConfig(0.0))
    # ridge regularizes a degenerate design
    assert np.all(np.isfinite(correct_camera(v, np.ones((3, 2)), RidgeConfig(1e-3)).as_array()))
    with pytest.raises(ValueError):
        correct_camera(np.zeros((3, 3)), np.zeros((2, 2)))


def test_residual_examples():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(7, 3))
    c = Camera(2, 3, 1, -1)
    u = project(v, c)
    assert projection_residual(v, u, c) == 0.0
    u2 = u.copy()
    u2[4] += [3.0, 4.0]
    assert projection_residual(v, u2, c) == pytest.approx(25.0, abs=1e-10)
    u3 = rng.normal(size=(7, 2))
    brute = sum((u3[n, a] - (c.as_array()[a] * v[n, a] + c.as_array()[2 + a])) ** 2 for n in range(7) for a in range(2))
    assert abs(projection_residual(v, u3, c) - brute) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 1e-4, 0.1, 1.0]))
def test_ridge_local_optimality(seed, xi):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(2, 60))
    v = rng.normal(size=(N, 3))
    u = rng.normal(size=(N, 2)) * 10
    c = correct_camera(v, u, RidgeConfig(xi)).as_array()
    best = ridge_objective(v, u, c, xi)
    eta = rng.normal(size=(200, 4))
    eta *= rng.uniform(0, 1e-3, size=(200, 1)) / np.linalg.norm(eta, axis=1, keepdims=True)
    for e in eta:
        assert best <= ridge_objective(v, u, c + e, xi) + 1e-12 * max(1.0, best)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_residual_monotone_in_xi(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(30, 3))
    u = rng.normal(size=(30, 2)) * 5 + 2
    res = [projection_residual(v, u, correct_camera(v, u, RidgeConfig(x))) for x in (0, 0.01, 0.1, 1)]
    assert all(a <= b + 1e-9 for a, b in zip(res, res[1:]))


def test_shrinkage():
    rng = np.random.default_rng(4)
    v = rng.normal(size=(40, 3))
    u = project(v, Camera(5, -3, 2, 7)) + rng.normal(size=(40, 2))
    big = correct_camera(v, u, RidgeConfig(1e6)).as_array()
    free = correct_camera(v, u, RidgeConfig(0.0)).as_array()
    assert np.linalg.norm(big) < 1e-3 * np.linalg.norm(free)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_project_correct_consistency(seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(int(rng.integers(2, 100)), 3))
    c = np.concatenate([rng.uniform(1, 100, 2) * rng.choice([-1, 1], 2), rng.normal(size=2) * 30])
    got = correct_camera(v, project(v, c), RidgeConfig(0.0)).as_array()
    assert np.max(np.abs(got - c)) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 1e-6]))
def test_camera_correction_non_harm(seed, xi):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(2, 200))
    v = rng.normal(size=(N, 3)) * 0.2
    u = rng.normal(size=(N, 2)) * 5 + 16
    prev = rng.normal(size=4) * 20
    fit = correct_camera(v, u, RidgeConfig(xi))
    assert projection_residual(v, u, fit) <= projection_residual(v, u, prev) + 1e-9


def test_batched_fit_matches_single():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(4, 9, 3))
    u = rng.normal(size=(4, 9, 2))
    batched = fit_camera_array(v, u, 1e-2)
    for b in range(4):
        assert np.allclose(batched[b], correct_camera(v[b], u[b], RidgeConfig(1e-2)).as_array(), atol=1e-12)


def test_fit_backward_matches_finite_differences():
    rng = np.random.default_rng(6)
    v = rng.normal(size=(8, 3))
    u = rng.normal(size=(8, 2)) * 4
    w = rng.normal(size=4)
    cam = fit_camera_array(v, u, 0.05)
    gv, gu = fit_camera_backward(v, u, cam, 0.05, w)

    def f():
        return float(w @ fit_camera_array(v, u, 0.05))

    for x, g in ((v, gv), (u, gu)):
        for idx in np.ndindex(*x.shape):
            fd, _ = central_difference(f, x, idx, 1e-6)
            assert relative_error(g[idx], fd) < 1e-6 or abs(g[idx] - fd) < 1e-9
