import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import optimize

from smoothps.calibration import (
    SolverOptions,
    balancing_residual,
    calibration_jacobian,
    calibration_residual,
    density_ratio,
    fit_weights,
    smoothed_weights,
    solve_tilting,
)
from smoothps.data import BalancingDesign, Sample, with_intercept
from smoothps.errors import Infeasible

from conftest import make_sample

LIN = BalancingDesign.linear([0])


def dual_oracle(sample, design):
    """Minimize c sum_resp exp(z'lam) - lam'(sum_all z - sum_resp z) with BFGS."""
    Z = with_intercept(design.evaluate(sample.X))
    Zr = Z[sample.delta]
    target = Z.sum(axis=0) - Zr.sum(axis=0)
    c = sample.n0 / sample.n1

    def f(lam):
        e = np.exp(Zr @ lam)
        return c * e.sum() - lam @ target, c * Zr.T @ e - target

    res = optimize.minimize(f, np.zeros(Z.shape[1]), jac=True, method="BFGS", options={"gtol": 1e-11})
    return res.x


def test_two_point_oracle_weights(toy):
    params, w = fit_weights(toy, LIN)
    np.testing.assert_allclose(w.omega, [2.0, 2.0], atol=1e-10)
    np.testing.assert_allclose(params.lam, [0.0, 0.0], atol=1e-10)


def test_infeasible_targets():
    s = Sample(np.array([[0.0], [1.0], [2.0], [3.0]]), [1.0, 2.0, np.nan, np.nan])
    with pytest.raises(Infeasible):
        solve_tilting(s, LIN)


def test_full_response_gives_unit_weights():
    s = Sample(np.arange(5.0).reshape(-1, 1), np.ones(5))
    params, w = fit_weights(s, LIN)
    assert np.all(params.lam == 0)
    assert np.all(w.omega == 1.0)


def test_zero_tilt_equal_groups_gives_two():
    s = Sample(np.zeros((4, 1)), [1.0, 1.0, np.nan, np.nan])
    params, w = fit_weights(s, BalancingDesign.intercept_only())
    np.testing.assert_allclose(w.omega, 2.0, rtol=1e-12)


def test_intercept_only_weight_is_n_over_n1():
    rng = np.random.default_rng(0)
    y = np.where(np.arange(10) < 5, 1.0, np.nan)
    s = Sample(rng.standard_normal((10, 2)), y)
    _, w = fit_weights(s, BalancingDesign.intercept_only())
    np.testing.assert_allclose(w.omega, 2.0, rtol=1e-12)


def test_matches_independent_dual_minimizer(sample):
    design = BalancingDesign.linear([0, 1])
    params = solve_tilting(sample, design)
    np.testing.assert_allclose(params.lam, dual_oracle(sample, design), atol=1e-6)


def test_residual_after_fit_and_after_perturbation(sample):
    design = BalancingDesign.linear([0, 1])
    _, w = fit_weights(sample, design)
    assert w.residual <= 1e-10
    bumped = w.omega.copy()
    bumped[0] += 1.0
    assert balancing_residual(sample, design, bumped) >= 1.0 / sample.n - 1e-12


def test_unit_weights_full_response_residual_zero():
    s = Sample(np.arange(4.0).reshape(-1, 1), np.ones(4))
    assert balancing_residual(s, LIN, np.ones(4)) == 0.0


def test_density_ratio_constant_tilts(toy):
    params = solve_tilting(toy, LIN)
    zero = type(params)(0.0, np.zeros(1), LIN, params.standardization)
    assert density_ratio(zero, [3.0]) == 1.0
    two = type(params)(np.log(2.0), np.zeros(1), LIN, params.standardization)
    assert density_ratio(two, [3.0]) == pytest.approx(2.0, rel=1e-15)


def test_density_ratio_averages_to_one(sample):
    design = BalancingDesign.linear([0, 1])
    params = solve_tilting(sample, design)
    r = density_ratio(params, sample.X_resp)
    assert r.mean() == pytest.approx(1.0, abs=1e-9)


def test_jacobian_matches_finite_differences(sample):
    design = BalancingDesign.linear([0, 1])
    lam = np.array([0.2, -0.3, 0.1])
    J = calibration_jacobian(sample, design, lam)
    h = 1e-6
    fd = np.column_stack([
        (calibration_residual(sample, design, lam + h * e) - calibration_residual(sample, design, lam - h * e)) / (2 * h)
        for e in np.eye(3)
    ])
    assert np.max(np.abs(J - fd) / np.maximum(np.abs(J), 1e-3)) < 1e-5


def test_random_start_reaches_same_solution(sample):
    design = BalancingDesign.linear([0, 1])
    a = solve_tilting(sample, design)
    start = np.random.default_rng(3).normal(0, 0.5, 3)
    b = solve_tilting(sample, design, SolverOptions(start=start))
    np.testing.assert_allclose(a.lam, b.lam, atol=1e-6)


def test_deterministic(sample):
    design = BalancingDesign.linear([0, 1])
    assert np.array_equal(solve_tilting(sample, design).lam, solve_tilting(sample, design).lam)


def test_external_odds_changes_only_the_intercept(sample):
    design = BalancingDesign.linear([0, 1])
    a, wa = fit_weights(sample, design)
    b, wb = fit_weights(sample, design, SolverOptions(c=0.5))
    np.testing.assert_allclose(wa.omega, wb.omega, rtol=1e-10)
    np.testing.assert_allclose(a.lambda1, b.lambda1, atol=1e-10)
    assert b.c == 0.5


@given(seed=st.integers(0, 10_000), shift=st.floats(-0.5, 1.0))
def test_balancing_and_weight_properties(seed, shift):
    s = make_sample(n=150, d=2, seed=seed, rate_shift=shift)
    design = BalancingDesign.linear([0, 1])
    _, w = fit_weights(s, design)
    assert w.residual <= 1e-10
    assert np.all(w.omega > 1.0)
    assert w.omega.sum() == pytest.approx(s.n, rel=1e-10)


@given(seed=st.integers(0, 10_000),
       A=st.lists(st.floats(-2, 2), min_size=4, max_size=4),
       shift=st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_span_invariance(seed, A, shift):
    A = np.array(A).reshape(2, 2)
    if abs(np.linalg.det(A)) < 0.1:
        A = A + 2 * np.eye(2)
    s = make_sample(n=150, d=2, seed=seed)
    X2 = s.X @ A + np.array(shift)
    s2 = Sample(X2, s.y, s.delta)
    design = BalancingDesign.linear([0, 1])
    _, w1 = fit_weights(s, design)
    _, w2 = fit_weights(s2, design)
    np.testing.assert_allclose(w1.omega, w2.omega, rtol=1e-8)


def test_smoothed_weights_formula(sample):
    design = BalancingDesign.linear([0, 1])
    params = solve_tilting(sample, design)
    w = smoothed_weights(sample, design, params)
    expected = 1 + sample.n0 / sample.n1 * np.exp(params.lambda0 + sample.X_resp @ params.lambda1)
    np.testing.assert_allclose(w.omega, expected, rtol=1e-14)
