import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import special_ortho_group

from smoothps.sdr import (
    ConditionalCovariance,
    SDROptions,
    _center,
    gaussian_gram,
    kernel_sdr,
    median_bandwidth,
    principal_angle,
    sdr_objective,
)


def single_index(n=200, d=4, seed=0):
    rng = np.random.default_rng(seed)
    w0 = np.zeros(d)
    w0[:2] = [1.0, 1.0]
    w0 /= np.linalg.norm(w0)
    X = rng.standard_normal((n, d))
    y = np.exp(X @ w0 / 2) + 0.1 * rng.standard_normal(n)
    return X, y, w0


def direct_objective(X, y, W, eps, sigma_x, sigma_y):
    """Tr[G_Y - G_Y G_W (G_W + N eps I)^-1] / N with plain inverses."""
    n = len(X)
    Gy = _center(gaussian_gram(y.reshape(-1, 1), sigma_y))
    Gw = _center(gaussian_gram(X @ W.T, sigma_x))
    return np.trace(Gy - Gy @ Gw @ np.linalg.inv(Gw + n * eps * np.eye(n))) / n


def test_objective_matches_direct_formula():
    X, y, _ = single_index(80)
    W = np.linalg.qr(np.random.default_rng(1).standard_normal((4, 2)))[0].T
    obj = ConditionalCovariance(X, y, 1e-3, y_rank_tol=0.0)
    val = obj.evaluate(W, 1.3)
    assert val == pytest.approx(direct_objective(X, y, W, 1e-3, 1.3, obj.sigma_y), rel=1e-8)


def test_gradient_matches_finite_differences():
    X, y, _ = single_index(60)
    W = np.linalg.qr(np.random.default_rng(2).standard_normal((4, 2)))[0].T
    obj = ConditionalCovariance(X, y, 1e-3)
    _, G = obj.evaluate(W, 1.1, gradient=True)
    h = 1e-6
    fd = np.zeros_like(W)
    for i in range(W.shape[0]):
        for j in range(W.shape[1]):
            E = np.zeros_like(W)
            E[i, j] = h
            fd[i, j] = (obj.evaluate(W + E, 1.1) - obj.evaluate(W - E, 1.1)) / (2 * h)
    np.testing.assert_allclose(G, fd, rtol=1e-5, atol=1e-9)


@settings(max_examples=10)
@given(seed=st.integers(0, 1000))
def test_rotation_within_span_leaves_objective(seed):
    X, y, _ = single_index(80)
    rng = np.random.default_rng(seed)
    W = np.linalg.qr(rng.standard_normal((4, 2)))[0].T
    Q = special_ortho_group.rvs(2, random_state=seed)
    assert sdr_objective(X, y, Q @ W) == pytest.approx(sdr_objective(X, y, W), abs=1e-10)


def test_full_dimension_any_orthogonal_w_same_value():
    X, y, _ = single_index(80, d=3)
    Q = special_ortho_group.rvs(3, random_state=4)
    sig = median_bandwidth(X)
    assert sdr_objective(X, y, Q, sigma=sig) == pytest.approx(sdr_objective(X, y, np.eye(3), sigma=sig), abs=1e-10)


def test_recovers_single_index_direction():
    X, y, w0 = single_index(300, seed=5)
    proj = kernel_sdr(X, 1, SDROptions(restarts=3), y=y)
    assert principal_angle(proj.W, w0) <= 0.2
    np.testing.assert_allclose(proj.W @ proj.W.T, np.eye(1), atol=1e-8)
    assert proj.converged


def test_history_nonincreasing_within_each_pass():
    X, y, _ = single_index(150, seed=6)
    proj = kernel_sdr(X, 2, SDROptions(restarts=1), y=y)
    for hist in proj.history:
        assert np.all(np.diff(hist) <= 1e-15)
    np.testing.assert_allclose(proj.W @ proj.W.T, np.eye(2), atol=1e-8)


def test_deterministic_and_thread_invariant():
    X, y, _ = single_index(120, seed=7)
    a = kernel_sdr(X, 1, SDROptions(restarts=3), y=y)
    b = kernel_sdr(X, 1, SDROptions(restarts=3, threads=3), y=y)
    assert np.array_equal(a.W, b.W)


def test_dimension_must_be_in_range():
    X, y, _ = single_index(30)
    with pytest.raises(ValueError):
        kernel_sdr(X, 0, y=y)
    with pytest.raises(ValueError):
        kernel_sdr(X, 5, y=y)


def test_uses_respondents_of_a_sample():
    from smoothps.data import Sample

    X, y, w0 = single_index(300, seed=8)
    delta = np.random.default_rng(0).random(300) < 0.8
    s = Sample(X, np.where(delta, y, np.nan), delta)
    a = kernel_sdr(s, 1, SDROptions(restarts=2))
    b = kernel_sdr(X[delta], 1, SDROptions(restarts=2), y=y[delta])
    assert np.array_equal(a.W, b.W)


def test_nonconvergence_is_flagged():
    X, y, _ = single_index(60, seed=9)
    with pytest.warns(UserWarning, match="gradient norm"):
        proj = kernel_sdr(X, 1, SDROptions(restarts=1, max_iter=1, bandwidth_passes=1), y=y)
    assert not proj.converged


def test_principal_angle_basic():
    assert principal_angle([[1.0, 0.0]], [[0.0, 1.0]]) == pytest.approx(np.pi / 2)
    assert principal_angle([[1.0, 1.0]], [[-2.0, -2.0]]) == pytest.approx(0.0, abs=1e-7)
