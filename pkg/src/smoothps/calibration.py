"""Exponential-tilting calibration of the log-linear density-ratio model.

The weight for a respondent is ``1 + c * exp(lambda0 + lambda1' b(x))`` with
``c = N0/N1``. The tilting parameters are chosen so that weighted respondent
totals of ``(1, b(x))`` reproduce full-sample totals. That system is the
gradient of a strictly convex dual, which is minimized by damped Newton.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg, optimize

from .data import BalancingDesign, Sample, Standardization, check_rank, validate, with_intercept
from .errors import Infeasible, MaxIterations, SingularJacobian

logger = logging.getLogger(__name__)

LAMBDA_BOUND = 50.0
GROWTH_LIMIT = 10
_ETA_CLIP = 700.0


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-10
    max_iter: int = 100
    # starting tilt on the original scale; zero when omitted
    start: Optional[np.ndarray] = None
    # external P(delta=0)/P(delta=1); N0/N1 when omitted
    c: Optional[float] = None
    standardize: bool = True


@dataclass(frozen=True)
class TiltResult:
    lam: np.ndarray
    iterations: int
    residual: float


@dataclass(frozen=True, eq=False)
class TiltingParams:
    lambda0: float
    lambda1: np.ndarray
    design: BalancingDesign = field(repr=False)
    standardization: Standardization = field(repr=False)
    c: float = 1.0
    iterations: int = 0
    residual: float = 0.0

    @property
    def lam(self) -> np.ndarray:
        return np.concatenate([[self.lambda0], self.lambda1])

    def linear_predictor(self, X) -> np.ndarray:
        return self.lambda0 + self.design.evaluate(X) @ self.lambda1


@dataclass(frozen=True, eq=False)
class SmoothedWeights:
    omega: np.ndarray
    c: float
    residual: float
    iterations: int

    @property
    def propensity(self) -> np.ndarray:
        return 1.0 / self.omega


def _exp(eta):
    return np.exp(np.minimum(eta, _ETA_CLIP))


def strictly_attainable(Zs: np.ndarray, target: np.ndarray) -> bool:
    """Whether ``target`` is a strictly positive mixture of the rows of ``Zs``.

    ``Zs`` carries an intercept column and ``target[0] == 1``, so this asks
    whether the target lies in the relative interior of the convex hull of
    the reference rows. Solved as an LP maximizing the smallest mixture mass.
    """
    m, k = Zs.shape
    # variables: mu_1..mu_m, s ; maximize s
    cost = np.zeros(m + 1)
    cost[-1] = -1.0
    A_eq = np.column_stack([Zs.T, np.zeros(k)])
    A_ub = np.column_stack([-np.eye(m), np.ones(m)])
    res = optimize.linprog(
        cost,
        A_ub=A_ub,
        b_ub=np.zeros(m),
        A_eq=A_eq,
        b_eq=target,
        bounds=[(0, None)] * m + [(None, 1.0 / m)],
        method="highs",
    )
    return bool(res.status == 0 and -res.fun > 1e-9 / m)


def tilt_newton(
    Zs: np.ndarray,
    target: np.ndarray,
    stop_map: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100,
    start: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, int, float]:
    """Solve ``mean_i exp(Zs_i' mu) Zs_i = target`` for ``mu``.

    Damped Newton on the dual ``mean exp(Zs mu) - mu' target`` with Armijo
    step halving. Stops when ``max|stop_map @ gradient| <= tol``.
    Returns ``(mu, iterations, residual)``.
    """
    m, k = Zs.shape
    mu = np.zeros(k) if start is None else np.array(start, dtype=float)

    def evaluate(mu):
        e = _exp(Zs @ mu)
        return e, e.mean() - mu @ target, Zs.T @ e / m - target

    e, f, g = evaluate(mu)
    residual = float(np.max(np.abs(stop_map @ g)))
    last_step = np.inf
    growth = 0
    for it in range(max_iter + 1):
        if residual <= tol:
            return _polish(Zs, mu, e, g, evaluate, stop_map, it, residual)
        if it == max_iter:
            break
        H = (Zs * e[:, None]).T @ Zs / m
        try:
            step = linalg.cho_solve(linalg.cho_factor(H), g)
        except linalg.LinAlgError:
            raise SingularJacobian("calibration Jacobian is singular") from None
        if not np.all(np.isfinite(step)):
            raise SingularJacobian("calibration Jacobian is singular")
        decrease = g @ step
        # Once the predicted dual decrease is below rounding, the dual cannot
        # rank candidates; judge steps by the residual norm instead.
        use_dual = decrease > 1e-13 * max(1.0, abs(f))
        gnorm = np.linalg.norm(g)
        t = 1.0
        accepted = False
        while t > 1e-12:
            cand = mu - t * step
            e2, f2, g2 = evaluate(cand)
            if use_dual:
                ok = np.isfinite(f2) and f2 <= f - 1e-4 * t * decrease
            else:
                ok = np.all(np.isfinite(g2)) and np.linalg.norm(g2) <= (1 - 1e-4 * t) * gnorm
            if ok:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        step_norm = t * np.linalg.norm(step)
        growth = growth + 1 if step_norm > last_step else 0
        last_step = step_norm
        mu, e, f, g = cand, e2, f2, g2
        residual = float(np.max(np.abs(stop_map @ g)))
        if growth >= GROWTH_LIMIT or np.max(np.abs(mu)) > LAMBDA_BOUND:
            if not strictly_attainable(Zs, target):
                raise Infeasible()
            growth = 0
    if not strictly_attainable(Zs, target):
        raise Infeasible()
    raise MaxIterations(f"calibration did not converge in {max_iter} iterations (residual {residual:.3g})")


def _polish(Zs, mu, e, g, evaluate, stop_map, it, residual):
    """One extra full Newton step at a converged point, kept if it helps.

    Inside the quadratic region this drives the residual to rounding level,
    so identities that hold exactly at the root hold to near machine precision.
    """
    if residual == 0.0:
        return mu, it, residual
    H = (Zs * e[:, None]).T @ Zs / Zs.shape[0]
    try:
        cand = mu - linalg.cho_solve(linalg.cho_factor(H), g)
    except linalg.LinAlgError:
        return mu, it, residual
    _, _, g2 = evaluate(cand)
    r2 = float(np.max(np.abs(stop_map @ g2)))
    if np.isfinite(r2) and r2 < residual:
        return cand, it + 1, r2
    return mu, it, residual


def fit_tilt(
    Z_ref: np.ndarray,
    Z_target: np.ndarray,
    residual_scale: float,
    opts: SolverOptions = SolverOptions(),
) -> tuple[np.ndarray, Standardization, int, float]:
    """Find ``lam`` with ``mean_ref exp(z' lam) z = mean_target z``.

    Both matrices carry the intercept column. The residual reported (and
    compared with ``opts.tol``) is ``residual_scale`` times the max-abs
    moment gap on the original scale. Returns ``(lam, standardization,
    iterations, residual)``.
    """
    check_rank(Z_ref)
    B_ref = Z_ref[:, 1:]
    std = Standardization.fit(B_ref) if opts.standardize else Standardization.identity(B_ref.shape[1])
    Zs = with_intercept(std.apply(B_ref))
    target = with_intercept(std.apply(Z_target[:, 1:])).mean(axis=0)
    stop_map = residual_scale * std.z_map()
    start = None if opts.start is None else std.to_standard(np.asarray(opts.start, dtype=float))
    mu, iterations, residual = tilt_newton(Zs, target, stop_map, opts.tol, opts.max_iter, start)
    return std.to_original(mu), std, iterations, residual


def solve_tilting(sample: Sample, design: BalancingDesign, opts: SolverOptions = SolverOptions()) -> TiltingParams:
    """Fit the tilting parameters so that smoothed weights calibrate ``(1, b(x))``."""
    validate(sample)
    B = design.evaluate(sample.X)
    Z = with_intercept(B)
    Z_resp = Z[sample.delta]
    check_rank(Z_resp)
    n, n1, n0 = sample.n, sample.n1, sample.n0
    c = n0 / n1 if opts.c is None else float(opts.c)
    if n0 == 0:
        return TiltingParams(0.0, np.zeros(design.L), design, Standardization.identity(design.L), c, 0, 0.0)
    start = None
    if opts.start is not None:
        start = np.array(opts.start, dtype=float)
        start[0] += np.log(c * n1 / n0)
    inner = SolverOptions(opts.tol, opts.max_iter, start, None, opts.standardize)
    lam, std, iterations, residual = fit_tilt(Z_resp, Z[~sample.delta], n0 / n, inner)
    # the solver absorbs c*N1/N0 into the intercept
    if opts.c is not None:
        lam = lam.copy()
        lam[0] -= np.log(c * n1 / n0)
    logger.debug("tilting converged in %d iterations, residual %.3g", iterations, residual)
    return TiltingParams(float(lam[0]), lam[1:], design, std, c, iterations, residual)


def density_ratio(params: TiltingParams, x) -> np.ndarray | float:
    """r*(x) = exp(lambda0 + lambda1' b(x)); scalar for a single covariate vector."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    X = x.reshape(1, -1) if single else x
    r = np.exp(params.linear_predictor(X))
    return float(r[0]) if single else r


def smoothed_weights(sample: Sample, design: BalancingDesign, params: TiltingParams) -> SmoothedWeights:
    """omega_i = 1 + c * r*(x_i) over respondents."""
    X_resp = sample.X_resp
    if sample.n0 == 0:
        omega = np.ones(sample.n1)
    else:
        omega = 1.0 + params.c * np.exp(params.lambda0 + design.evaluate(X_resp) @ params.lambda1)
    residual = balancing_residual(sample, design, omega)
    return SmoothedWeights(omega, params.c, residual, params.iterations)


def balancing_residual(sample: Sample, design: BalancingDesign, weights) -> float:
    """max_j |sum_resp w_i z_ij - sum_all z_ij| / N."""
    Z = with_intercept(design.evaluate(sample.X))
    gap = Z[sample.delta].T @ np.asarray(weights, dtype=float) - Z.sum(axis=0)
    return float(np.max(np.abs(gap)) / sample.n)


def calibration_residual(sample: Sample, design: BalancingDesign, lam, c: Optional[float] = None) -> np.ndarray:
    """Vector ``(sum_resp omega(lam) z - sum_all z) / N`` on the original scale."""
    lam = np.asarray(lam, dtype=float)
    Z = with_intercept(design.evaluate(sample.X))
    c = sample.n0 / sample.n1 if c is None else c
    omega = 1.0 + c * np.exp(Z[sample.delta] @ lam)
    return (Z[sample.delta].T @ omega - Z.sum(axis=0)) / sample.n


def calibration_jacobian(sample: Sample, design: BalancingDesign, lam, c: Optional[float] = None) -> np.ndarray:
    """d residual / d lam^T, the matrix Newton inverts."""
    lam = np.asarray(lam, dtype=float)
    Z = with_intercept(design.evaluate(sample.X))[sample.delta]
    c = sample.n0 / sample.n1 if c is None else c
    e = np.exp(Z @ lam)
    return c * (Z * e[:, None]).T @ Z / sample.n


def fit_weights(sample: Sample, design: BalancingDesign, opts: SolverOptions = SolverOptions()):
    """Convenience: ``(params, weights)`` in one call."""
    params = solve_tilting(sample, design, opts)
    return params, smoothed_weights(sample, design, params)
