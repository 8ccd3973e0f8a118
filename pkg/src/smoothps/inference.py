"""Variance estimation and the empirical likelihood ratio test."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import linalg, optimize, stats

from .calibration import SolverOptions, TiltingParams, smoothed_weights, solve_tilting
from .data import BalancingDesign, EstimatingFunction, Sample, Standardization, mean_function, validate, with_intercept
from .errors import Infeasible, SingularTau, SmoothPSError, TooManyFailures
from .estimators import EstimateResult, estimate, sps_estimate, weighted_least_squares

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class InfluenceDecomposition:
    d: np.ndarray  # (N, p), before applying tau^-1
    beta: np.ndarray  # (L+1, p)
    tau: np.ndarray  # (p, p)


def influence(
    sample: Sample,
    design: BalancingDesign,
    params: TiltingParams,
    theta_hat,
    estfun: Optional[EstimatingFunction] = None,
) -> InfluenceDecomposition:
    """Linearization terms ``d_i = z_i' beta + delta_i omega_i (U_i - z_i' beta)``.

    ``beta`` solves the respondent normal equations weighted by
    ``exp(lambda' z)``.
    """
    estfun = estfun or mean_function()
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    Z = with_intercept(design.evaluate(sample.X))
    Z_resp = Z[sample.delta]
    X_resp, y_resp = sample.X_resp, sample.y_resp
    omega = smoothed_weights(sample, design, params).omega
    U = estfun.eval(theta_hat, X_resp, y_resp)
    tilt = np.exp(params.linear_predictor(X_resp))
    beta = weighted_least_squares(Z_resp, U, tilt).reshape(Z.shape[1], -1)
    d = Z @ beta
    d[sample.delta] += omega[:, None] * (U - Z_resp @ beta)
    tau = np.einsum("i,ijk->jk", omega, estfun.jac(theta_hat, X_resp, y_resp)) / sample.n
    return InfluenceDecomposition(d, beta, tau)


def sandwich(d: np.ndarray, tau: np.ndarray, n: int) -> np.ndarray:
    """``n^-1 tau^-1 S_dd tau^-T`` with ``S_dd`` the (n-1)-divisor covariance of d."""
    S = np.atleast_2d(np.cov(d, rowvar=False, ddof=1)) if d.shape[0] > 1 else np.zeros((d.shape[1],) * 2)
    try:
        tinv = np.linalg.inv(tau)
    except np.linalg.LinAlgError:
        raise SingularTau("derivative of the estimating function is singular") from None
    if not np.all(np.isfinite(tinv)) or np.linalg.cond(tau) > 1e14:
        raise SingularTau("derivative of the estimating function is singular")
    V = tinv @ S @ tinv.T / n
    return (V + V.T) / 2


def linearized_variance(
    sample: Sample,
    design: BalancingDesign,
    params: TiltingParams,
    theta_hat,
    estfun: Optional[EstimatingFunction] = None,
) -> np.ndarray:
    """Linearization variance of the smoothed PS estimator."""
    inf = influence(sample, design, params, theta_hat, estfun)
    return sandwich(inf.d, inf.tau, sample.n)


def sps_with_variance(
    sample: Sample,
    design: BalancingDesign,
    estfun: Optional[EstimatingFunction] = None,
    opts: SolverOptions = SolverOptions(),
) -> EstimateResult:
    res = sps_estimate(sample, design, estfun, opts)
    res.cov = linearized_variance(sample, design, res.tilting, res.theta, estfun)
    return res


# ---------------------------------------------------------------------------
# Bootstrap


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    cov: np.ndarray
    estimates: np.ndarray  # successful replicates, in replicate order
    failures: int
    reps: int


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for replicate ``index``; scheduling-invariant."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def bootstrap_variance(
    sample: Sample,
    design: BalancingDesign,
    estfun: Optional[EstimatingFunction] = None,
    B: int = 500,
    seed: int = 0,
    method: str = "ip",
    threads: int = 1,
    max_failure_rate: float = 0.10,
    fit: Optional[Callable[[Sample], np.ndarray]] = None,
) -> BootstrapResult:
    """Nonparametric bootstrap over units, refitting weights and theta.

    Replicates whose refit raises are dropped and counted.
    """
    if B < 2:
        raise ValueError("bootstrap needs at least two replicates")
    validate(sample)
    estfun = estfun or mean_function()
    if fit is None:
        def fit(s):
            return estimate(s, design, method, estfun).theta

    def one(b):
        rng = replicate_rng(seed, b)
        idx = rng.integers(0, sample.n, size=sample.n)
        try:
            return fit(sample.take(idx))
        except SmoothPSError as exc:
            logger.debug("bootstrap replicate %d failed: %s", b, exc)
            return None

    if threads and threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(B)))
    else:
        results = [one(b) for b in range(B)]
    ok = [r for r in results if r is not None]
    failures = B - len(ok)
    if failures > max_failure_rate * B or len(ok) < 2:
        raise TooManyFailures(f"{failures} of {B} bootstrap replicates failed")
    if failures:
        warnings.warn(f"{failures} of {B} bootstrap replicates failed and were dropped")
    est = np.array(ok).reshape(len(ok), -1)
    cov = np.atleast_2d(np.cov(est, rowvar=False, ddof=1))
    return BootstrapResult(cov, est, failures, B)


# ---------------------------------------------------------------------------
# Empirical likelihood


def _log_star(u, eps):
    """Owen's pseudo-logarithm: log for u >= eps, quadratic continuation below."""
    ok = u >= eps
    safe = np.where(ok, u, 1.0)
    val = np.where(ok, np.log(safe), np.log(eps) - 1.5 + 2 * u / eps - u ** 2 / (2 * eps ** 2))
    d1 = np.where(ok, 1.0 / safe, 2 / eps - u / eps ** 2)
    d2 = np.where(ok, -1.0 / safe ** 2, -1.0 / eps ** 2)
    return val, d1, d2


def el_inner(G: np.ndarray, max_iter: int = 100, tol: float = 1e-12):
    """Minimize ``F(eta) = -sum log*(1 + G eta)`` over ``eta``.

    ``-N1 log N1 + min F`` is the log empirical likelihood of the moment
    conditions ``sum p_i g_i = 0``. Returns ``(F, eta, u, d1)`` where ``u =
    1 + G eta`` and ``d1`` the pseudo-log derivative at ``u``.
    """
    m, k = G.shape
    eps = 1.0 / m
    eta = np.zeros(k)
    val, d1, d2 = _log_star(np.ones(m), eps)
    F = -val.sum()
    for _ in range(max_iter):
        grad = -(G.T @ d1)
        if np.max(np.abs(grad)) <= tol * m:
            break
        H = -(G * d2[:, None]).T @ G
        try:
            step = linalg.solve(H + 1e-12 * np.trace(H) / k * np.eye(k), grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            cand = eta - t * step
            v2, e1, e2 = _log_star(1 + G @ cand, eps)
            F2 = -v2.sum()
            if F2 <= F + 1e-4 * t * (grad @ -step) or F2 < F:
                break
            t *= 0.5
        else:
            break
        eta, F, d1, d2 = cand, F2, e1, e2
    u = 1 + G @ eta
    return F, eta, u, d1


EL_SCOPES = ("full", "respondents")


class _ELProfile:
    """Constraint functions of the log-linear EL problem at a fixed theta.

    Coordinates are standardized: ``mu`` multiplies ``(1, b_std)``.

    ``scope="respondents"`` puts masses on respondents only and treats the
    full-sample mean of ``b`` as a fixed target, with constraints on
    ``(N1/N) omega b``, ``omega U`` and ``exp(lambda' z) - 1``.
    ``scope="full"`` puts masses on all ``N`` units with the moment functions
    ``delta omega z - z`` and ``delta omega U``, so the sampling variability
    of the full-sample totals enters the likelihood.
    """

    def __init__(self, sample: Sample, design: BalancingDesign, estfun: EstimatingFunction, theta, scope="full"):
        if scope not in EL_SCOPES:
            raise ValueError(f"scope must be one of {EL_SCOPES}")
        self.scope = scope
        B = design.evaluate(sample.X)
        self.std = Standardization.fit(B[sample.delta])
        Bs = self.std.apply(B)
        self.delta = sample.delta
        self.bs = Bs[sample.delta]
        self.zs = with_intercept(self.bs)
        self.zs_all = with_intercept(Bs)
        self.bbar = Bs.mean(axis=0)
        self.n, self.n1 = sample.n, sample.n1
        self.c = sample.n0 / sample.n1
        self.U = estfun.eval(np.atleast_1d(np.asarray(theta, dtype=float)), sample.X_resp, sample.y_resp)
        self.m = self.n if scope == "full" else self.n1
        self.scale = None

    def g(self, mu):
        e = np.exp(np.minimum(self.zs @ mu, 700.0))
        omega = 1.0 + self.c * e
        if self.scope == "respondents":
            G = np.column_stack([
                (self.n1 / self.n) * omega[:, None] * self.bs - self.bbar,
                omega[:, None] * self.U,
                e - 1.0,
            ])
        else:
            G = np.zeros((self.n, self.zs.shape[1] + self.U.shape[1]))
            k = self.zs.shape[1]
            G[:, :k] = -self.zs_all
            G[self.delta, :k] += omega[:, None] * self.zs
            G[self.delta, k:] = omega[:, None] * self.U
        return G, e

    def set_scale(self, mu):
        G, _ = self.g(mu)
        s = G.std(axis=0)
        self.scale = np.where(s > 0, s, 1.0)

    def value_and_grad(self, mu):
        G, e = self.g(mu)
        F, eta, u, d1 = el_inner(G / self.scale)
        eta = eta / self.scale
        p = self.U.shape[1]
        if self.scope == "respondents":
            L = self.bs.shape[1]
            eb, eu, ee = eta[:L], eta[L:L + p], eta[-1]
            a = e * (self.c * (self.n1 / self.n) * (self.bs @ eb) + self.c * (self.U @ eu) + ee)
            grad = -(self.zs.T @ (d1 * a))
        else:
            k = self.zs.shape[1]
            a = self.c * e * (self.zs @ eta[:k] + self.U @ eta[k:])
            grad = -(self.zs.T @ (d1[self.delta] * a))
        return F - self.m * np.log(self.m), grad, u


def el_profile_loglik(
    sample: Sample,
    design: BalancingDesign,
    theta,
    estfun: Optional[EstimatingFunction] = None,
    start: Optional[TiltingParams] = None,
    gtol: float = 1e-8,
    scope: str = "full",
) -> float:
    """``max_lambda`` of the log empirical likelihood at ``theta``.

    The inner problem over point masses is solved in its dual; the outer
    maximization over the tilting parameters runs BFGS from the two-step
    calibration solution. Raises :class:`Infeasible` when ``theta`` cannot be
    supported by positive masses.
    """
    estfun = estfun or mean_function()
    validate(sample)
    if start is None:
        start = solve_tilting(sample, design)
    prof = _ELProfile(sample, design, estfun, theta, scope)
    mu0 = prof.std.to_standard(start.lam)
    prof.set_scale(mu0)

    def objective(mu):
        val, grad, _ = prof.value_and_grad(mu)
        return -val, -grad

    f0, g0 = objective(mu0)
    if np.max(np.abs(g0)) <= gtol:
        mu, val = mu0, -f0
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = optimize.minimize(objective, mu0, jac=True, method="BFGS",
                                    options={"gtol": gtol, "maxiter": 500, "norm": np.inf})
        mu, val = res.x, -res.fun
    _, _, u = prof.value_and_grad(mu)
    # a proper dual solution has masses 1/(m u_i) summing to one; when zero
    # is outside the hull the multiplier diverges and the masses vanish
    if np.min(u) < 1.0 / prof.m or abs(np.mean(1.0 / u) - 1.0) > 1e-6:
        raise Infeasible(f"theta = {np.ravel(theta)} is outside the empirical likelihood support")
    return float(val)


@dataclass(frozen=True)
class ELTest:
    statistic: float
    p_value: float
    theta_hat: np.ndarray
    infeasible: bool = False

    def __iter__(self):
        return iter((self.statistic, self.p_value))


def el_ratio_test(
    sample: Sample,
    design: BalancingDesign,
    theta0,
    estfun: Optional[EstimatingFunction] = None,
    scope: str = "full",
) -> ELTest:
    """Empirical likelihood ratio test of ``theta = theta0``.

    The statistic compares the profile at the two-step estimate with the
    profile at ``theta0`` and is referred to chi-square with ``p`` degrees of
    freedom.
    """
    estfun = estfun or mean_function()
    fit = sps_estimate(sample, design, estfun)
    top = el_profile_loglik(sample, design, fit.theta, estfun, start=fit.tilting, scope=scope)
    try:
        at0 = el_profile_loglik(sample, design, theta0, estfun, start=fit.tilting, scope=scope)
    except Infeasible:
        return ELTest(float("inf"), 0.0, fit.theta, infeasible=True)
    stat = max(0.0, 2.0 * (top - at0))
    return ELTest(stat, float(stats.chi2.sf(stat, estfun.p)), fit.theta)
