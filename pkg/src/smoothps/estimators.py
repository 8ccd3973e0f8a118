"""Point estimators of theta from weighted estimating equations.

Every method here reduces to choosing respondent weights ``w_i`` and solving
``N^-1 sum_resp w_i U(theta; x_i, y_i) = 0``. They differ only in how the
weights are built.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, optimize, special, stats

from .calibration import (
    SmoothedWeights,
    SolverOptions,
    TiltingParams,
    fit_tilt,
    smoothed_weights,
    solve_tilting,
    strictly_attainable,
)
from .data import (
    BalancingDesign,
    EstimatingFunction,
    Sample,
    Standardization,
    check_rank,
    mean_function,
    validate,
    with_intercept,
)
from .errors import Infeasible, MaxIterations, NonPositiveWeight, NoRoot, Separation

METHODS = ("ip", "mle", "cbps", "ebps")


@dataclass(eq=False)
class EstimateResult:
    theta: np.ndarray
    method: str
    cov: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)
    weights: Optional[np.ndarray] = field(default=None, repr=False)
    tilting: Optional[TiltingParams] = field(default=None, repr=False)

    @property
    def se(self) -> Optional[np.ndarray]:
        if self.cov is None:
            return None
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def ci(self, level: float = 0.95) -> Optional[np.ndarray]:
        """Wald intervals as a ``(p, 2)`` array."""
        if self.cov is None:
            return None
        z = stats.norm.ppf(0.5 + level / 2)
        return np.column_stack([self.theta - z * self.se, self.theta + z * self.se])


def solve_weighted(
    weights: np.ndarray,
    X: np.ndarray,
    Y: np.ndarray,
    estfun: EstimatingFunction,
    n: int,
    tol: float = 1e-10,
    max_iter: int = 50,
    start: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, int]:
    """Root of ``n^-1 sum w_i U(theta; x_i, y_i)`` by Newton.

    Falls back to bracketing bisection for a scalar parameter when Newton
    stalls.
    """
    w = np.asarray(weights, dtype=float)

    def G(theta):
        return w @ estfun.eval(theta, X, Y) / n

    def J(theta):
        return np.einsum("i,ijk->jk", w, estfun.jac(theta, X, Y)) / n

    theta = estfun.start(X, Y, w) if start is None else np.array(start, dtype=float)
    g = G(theta)
    for it in range(max_iter):
        if np.max(np.abs(g)) <= tol:
            return theta, it
        try:
            step = np.linalg.solve(J(theta), g)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        t = 1.0
        while t > 1e-8:
            cand = theta - t * step
            g2 = G(cand)
            if np.linalg.norm(g2) < np.linalg.norm(g) or np.max(np.abs(g2)) <= tol:
                break
            t *= 0.5
        else:
            break
        theta, g = cand, g2
        if np.max(np.abs(t * step)) <= tol * (1.0 + np.max(np.abs(theta))) and np.max(np.abs(g)) <= 1e3 * tol:
            return theta, it + 1
    if np.max(np.abs(g)) <= tol:
        return theta, max_iter
    if estfun.p == 1:
        return _bisect(lambda t: float(G(np.array([t]))[0]), float(theta[0]), tol), max_iter
    raise NoRoot(f"estimating equation not solved (|U| = {np.max(np.abs(g)):.3g})")


def _bisect(f, x0, tol):
    width = 1.0 + abs(x0)
    f0 = f(x0)
    for _ in range(60):
        lo, hi = x0 - width, x0 + width
        flo, fhi = f(lo), f(hi)
        if np.sign(flo) != np.sign(fhi):
            root = optimize.brentq(f, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps)
            return np.array([root])
        width *= 2
    raise NoRoot(f"no sign change found for the estimating equation (U = {f0:.3g})")


def _weighted_result(sample, weights, estfun, method, diagnostics, tilting=None):
    theta, it = solve_weighted(weights, sample.X_resp, sample.y_resp, estfun, sample.n)
    diagnostics = dict(diagnostics)
    diagnostics["theta_iterations"] = it
    return EstimateResult(theta, method, diagnostics=diagnostics, weights=weights, tilting=tilting)


def sps_estimate(
    sample: Sample,
    design: BalancingDesign,
    estfun: Optional[EstimatingFunction] = None,
    opts: SolverOptions = SolverOptions(),
) -> EstimateResult:
    """Smoothed propensity-score estimator with tilting weights."""
    estfun = estfun or mean_function()
    params = solve_tilting(sample, design, opts)
    w = smoothed_weights(sample, design, params)
    diag = {"iterations": w.iterations, "residual": w.residual, "c": w.c}
    return _weighted_result(sample, w.omega, estfun, "ip", diag, tilting=params)


def _tilt_values(sample, design, source):
    """exp(lambda' z) over respondents from params or smoothed weights."""
    if isinstance(source, TiltingParams):
        return np.exp(source.linear_predictor(sample.X_resp)), source.c
    if isinstance(source, SmoothedWeights):
        return (np.asarray(source.omega) - 1.0) / source.c, source.c
    c = sample.n0 / sample.n1  # a plain vector of smoothed weights
    return (np.asarray(source, dtype=float) - 1.0) / c, c


def weighted_least_squares(Z: np.ndarray, V: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Coefficients solving ``sum w_i (v_i - z_i' beta) z_i = 0`` column-wise."""
    check_rank(Z * np.sqrt(w)[:, None], "weighted regression design")
    sw = np.sqrt(w)
    V = np.asarray(V, dtype=float)
    Vw = V * sw if V.ndim == 1 else V * sw[:, None]
    beta, *_ = np.linalg.lstsq(Z * sw[:, None], Vw, rcond=None)
    return beta


def regression_imputation_form(sample: Sample, design: BalancingDesign, weights) -> float:
    """Mean estimate written as regression imputation.

    ``weights`` is the fitted :class:`TiltingParams`,
    :class:`~smoothps.calibration.SmoothedWeights` or the vector of
    smoothed weights. Nonrespondents are
    imputed by ``z' beta`` where ``beta`` solves the normal equations
    weighted by ``exp(lambda' z)`` over respondents.
    """
    validate(sample)
    y_resp = sample.y_resp
    if sample.n0 == 0:
        return float(y_resp.sum() / sample.n)
    Z = with_intercept(design.evaluate(sample.X))
    tilt, _ = _tilt_values(sample, design, weights)
    beta = weighted_least_squares(Z[sample.delta], y_resp, tilt)
    imputed = Z[~sample.delta] @ beta
    return float((y_resp.sum() + imputed.sum()) / sample.n)


def fractional_imputation_form(sample: Sample, design: BalancingDesign, weights) -> float:
    """Mean estimate with every nonrespondent imputed by the tilt-weighted
    respondent mean (a fractional hot-deck view)."""
    y_resp = sample.y_resp
    if sample.n0 == 0:
        return float(y_resp.sum() / sample.n)
    tilt, _ = _tilt_values(sample, design, weights)
    yhat = tilt @ y_resp / tilt.sum()
    return float((y_resp.sum() + sample.n0 * yhat) / sample.n)


# ---------------------------------------------------------------------------
# Baselines


def fit_logistic(Z: np.ndarray, delta: np.ndarray, max_iter: int = 100, tol: float = 1e-10) -> np.ndarray:
    """Logistic MLE by Newton-Raphson. Raises :class:`Separation` when the
    likelihood has no finite maximizer."""
    check_rank(Z, "logistic design")
    std = Standardization.fit(Z[:, 1:])
    Zs = with_intercept(std.apply(Z[:, 1:]))
    d = delta.astype(float)
    gamma = np.zeros(Zs.shape[1])
    p = d.mean()
    if p in (0.0, 1.0):
        raise Separation("response indicator is constant")
    gamma[0] = np.log(p / (1 - p))
    for _ in range(max_iter):
        eta = Zs @ gamma
        mu = special.expit(eta)
        score = Zs.T @ (d - mu)
        W = mu * (1 - mu)
        H = (Zs * W[:, None]).T @ Zs
        try:
            step = linalg.solve(H, score, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise Separation("information matrix became singular") from None
        gamma = gamma + step
        if np.max(np.abs(gamma)) > 30 or np.max(np.abs(eta)) > 40:
            raise Separation("logistic coefficients diverge; the response is separated")
        if np.max(np.abs(step)) <= tol * (1 + np.max(np.abs(gamma))):
            return std.to_original(gamma)
    raise Separation("logistic likelihood did not converge")


def mle_ipw_estimate(
    sample: Sample,
    covariates: BalancingDesign | Sequence[int],
    estfun: Optional[EstimatingFunction] = None,
) -> EstimateResult:
    """Inverse probability weighting with a logistic response model."""
    estfun = estfun or mean_function()
    validate(sample)
    design = covariates if isinstance(covariates, BalancingDesign) else BalancingDesign.linear(covariates)
    Z = with_intercept(design.evaluate(sample.X))
    if sample.n0 == 0:
        return _weighted_result(sample, np.ones(sample.n1), estfun, "mle", {"gamma": [0.0] * Z.shape[1]})
    gamma = fit_logistic(Z, sample.delta)
    pi = special.expit(Z[sample.delta] @ gamma)
    return _weighted_result(sample, 1.0 / pi, estfun, "mle", {"gamma": gamma.tolist()})


def el_calibration_weights(Z_resp: np.ndarray, totals: np.ndarray, tol: float = 1e-10, max_iter: int = 100):
    """Weights maximizing ``sum log w_i`` subject to ``sum w_i z_i = totals``.

    The solution is ``w_i = 1 / (gamma' z_i)`` where ``gamma`` minimizes the
    convex dual ``gamma' totals - sum log(gamma' z_i)`` over the region where
    every ``gamma' z_i > 0``. Steps are shortened to stay in that region.
    """
    n1 = Z_resp.shape[0]
    N = totals[0]
    std = Standardization.fit(Z_resp[:, 1:])
    Zs = with_intercept(std.apply(Z_resp[:, 1:]))
    A = std.z_map()
    T = np.linalg.solve(A, totals)
    gamma = np.zeros(Zs.shape[1])
    gamma[0] = n1 / N

    def evaluate(g):
        u = Zs @ g
        if np.any(u <= 0):
            return u, np.inf, None
        return u, g @ T - np.log(u).sum(), T - Zs.T @ (1.0 / u)

    u, f, grad = evaluate(gamma)
    accepted, outside = True, False
    for it in range(max_iter + 1):
        residual = float(np.max(np.abs(A @ grad)) / N)
        if residual <= tol:
            return 1.0 / u, it, residual
        if it == max_iter:
            break
        H = (Zs / u[:, None] ** 2).T @ Zs
        step = linalg.solve(H, grad, assume_a="pos")
        decrease = grad @ step
        # below rounding the dual cannot rank candidates; use the residual norm
        use_dual = decrease > 1e-13 * max(1.0, abs(f))
        gnorm = np.linalg.norm(grad)
        t = 1.0
        accepted = False
        outside = True  # every candidate so far left the region gamma' z > 0
        while t > 1e-14:
            cand = gamma - t * step
            u2, f2, g2 = evaluate(cand)
            outside = outside and g2 is None
            if g2 is not None and (f2 <= f - 1e-4 * t * decrease if use_dual
                                   else np.linalg.norm(g2) <= (1 - 1e-4 * t) * gnorm):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        gamma, u, f, grad = cand, u2, f2, g2
    if not strictly_attainable(Zs, T / N):
        raise Infeasible()
    if not accepted and outside:
        raise NonPositiveWeight("EL multiplier path left the positive-weight region")
    raise MaxIterations("EL calibration did not converge")


def cbps_el_estimate(
    sample: Sample,
    design: BalancingDesign,
    estfun: Optional[EstimatingFunction] = None,
    tol: float = 1e-10,
) -> EstimateResult:
    """Empirical-likelihood calibration weights (the CBPS comparator)."""
    estfun = estfun or mean_function()
    validate(sample)
    Z = with_intercept(design.evaluate(sample.X))
    Z_resp = Z[sample.delta]
    check_rank(Z_resp)
    if sample.n0 == 0:
        return _weighted_result(sample, np.ones(sample.n1), estfun, "cbps", {"iterations": 0, "residual": 0.0})
    w, it, residual = el_calibration_weights(Z_resp, Z.sum(axis=0), tol=tol)
    return _weighted_result(sample, w, estfun, "cbps", {"iterations": it, "residual": residual})


def ebps_weights(sample: Sample, design: BalancingDesign, opts: SolverOptions = SolverOptions()):
    """Entropy-balancing weights ``w_i = (N/N1) exp(gamma' z_i)`` calibrated to
    full-sample totals. Returns ``(weights, iterations, residual)``."""
    Z = with_intercept(design.evaluate(sample.X))
    Z_resp = Z[sample.delta]
    if sample.n0 == 0:
        return np.ones(sample.n1), 0, 0.0
    gamma, _, it, residual = fit_tilt(Z_resp, Z, 1.0, opts)
    w = (sample.n / sample.n1) * np.exp(Z_resp @ gamma)
    return w, it, residual


def ebps_estimate(
    sample: Sample,
    design: BalancingDesign,
    estfun: Optional[EstimatingFunction] = None,
    opts: SolverOptions = SolverOptions(),
) -> EstimateResult:
    """Entropy-balancing weights (exponential family meeting the constraints)."""
    estfun = estfun or mean_function()
    validate(sample)
    check_rank(with_intercept(design.evaluate(sample.X_resp)))
    w, it, residual = ebps_weights(sample, design, opts)
    return _weighted_result(sample, w, estfun, "ebps", {"iterations": it, "residual": residual})


def dr_weights(sample: Sample, true_pi, design: BalancingDesign, params: Optional[TiltingParams] = None,
               force_zero_regression: bool = False) -> np.ndarray:
    """Respondent weights equivalent to the doubly robust estimating function
    with known propensities.

    With ``Ubar(theta; x) = z' beta(theta)`` and ``beta`` linear in the
    respondent U values, ``sum_i Ubar_i + sum_resp (U_i - Ubar_i)/pi_i`` is a
    fixed linear combination of respondent U values.
    """
    pi = np.asarray(true_pi, dtype=float)
    pi_resp = pi[sample.delta] if pi.size == sample.n else pi
    inv = 1.0 / pi_resp
    if force_zero_regression:
        return inv
    Z = with_intercept(design.evaluate(sample.X))
    Z_resp = Z[sample.delta]
    if params is None:
        params = solve_tilting(sample, design)
    tilt = np.exp(params.linear_predictor(sample.X_resp))
    a = Z.sum(axis=0) - Z_resp.T @ inv
    # beta = (Z' W Z)^-1 Z' W U, so a' beta = h' U with h = W Z (Z' W Z)^-1 a
    M = (Z_resp * tilt[:, None]).T @ Z_resp
    h = tilt * (Z_resp @ np.linalg.solve(M, a))
    return inv + h


def true_pi_dr_estimate(
    sample: Sample,
    true_pi,
    design: BalancingDesign,
    estfun: Optional[EstimatingFunction] = None,
    force_zero_regression: bool = False,
) -> EstimateResult:
    """Doubly robust estimator built on the true selection probabilities."""
    estfun = estfun or mean_function()
    validate(sample)
    w = dr_weights(sample, true_pi, design, force_zero_regression=force_zero_regression)
    return _weighted_result(sample, w, estfun, "dr_true_pi", {})


def known_ratio_estimate(
    sample: Sample, ratio, estfun: Optional[EstimatingFunction] = None, c: Optional[float] = None
) -> EstimateResult:
    """PS estimator with weights ``1 + c r(x_i)`` for a supplied (unsmoothed)
    density ratio ``r`` evaluated at respondents or at every unit."""
    estfun = estfun or mean_function()
    validate(sample)
    r = np.asarray(ratio, dtype=float)
    r = r[sample.delta] if r.size == sample.n else r
    c = sample.n0 / sample.n1 if c is None else c
    return _weighted_result(sample, 1.0 + c * r, estfun, "ps_true_r", {})


def estimate(sample: Sample, design: BalancingDesign, method: str = "ip",
             estfun: Optional[EstimatingFunction] = None, opts: SolverOptions = SolverOptions()) -> EstimateResult:
    """Dispatch on ``method`` in ``{"ip", "mle", "cbps", "ebps"}``.

    The logistic model for ``mle`` uses the balancing design as its linear
    predictor.
    """
    if method == "ip":
        return sps_estimate(sample, design, estfun, opts)
    if method == "mle":
        return mle_ipw_estimate(sample, design, estfun)
    if method == "cbps":
        return cbps_el_estimate(sample, design, estfun, tol=opts.tol)
    if method == "ebps":
        return ebps_estimate(sample, design, estfun, opts)
    raise ValueError(f"unknown method {method!r}")
