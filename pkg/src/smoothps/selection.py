"""SCAD-penalized selection of calibration covariates and the two-stage estimator."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .calibration import SolverOptions
from .data import BalancingDesign, EstimatingFunction, Sample, check_rank, validate, with_intercept
from .errors import NoConvergence, RankDeficient
from .estimators import EstimateResult
from .inference import sps_with_variance

logger = logging.getLogger(__name__)

SCAD_A = 3.7


def scad_penalty_deriv(alpha_abs, lam: float, a: float = SCAD_A):
    """Derivative ``q_lambda(|alpha|)`` of the SCAD penalty.

    >>> scad_penalty_deriv(0.5, 1.0)
    1.0
    >>> round(scad_penalty_deriv(2.0, 1.0), 5)
    0.62963
    """
    if lam <= 0:
        return np.zeros_like(np.asarray(alpha_abs, dtype=float)) if np.ndim(alpha_abs) else 0.0
    t = np.abs(np.asarray(alpha_abs, dtype=float))
    q = lam * np.where(t < lam, 1.0, np.maximum(a * lam - t, 0.0) / ((a - 1) * lam))
    return float(q) if q.ndim == 0 else q


@dataclass(frozen=True)
class SelectOptions:
    a: float = SCAD_A
    threshold: float = 1e-6
    tol: float = 1e-10
    max_iter: int = 1000
    n_grid: int = 40
    grid_ratio: float = 1e-3
    columns: Optional[Sequence[int]] = None
    threads: int = 1


@dataclass(frozen=True, eq=False)
class PathPoint:
    lam: float
    criterion: float
    support: tuple
    rss: float


@dataclass(frozen=True, eq=False)
class SelectionResult:
    support: tuple  # column indices into the candidate columns, 0-based
    alpha: np.ndarray  # slopes on the original scale, zero off the support
    intercept: float
    lam: float
    path: tuple = field(default=())
    columns: tuple = field(default=())

    @property
    def selected_columns(self) -> tuple:
        """Indices into ``sample.X`` of the selected covariates."""
        return tuple(self.columns[j] for j in self.support)


def scad_threshold(z: float, lam: float, a: float = SCAD_A, v: float = 1.0) -> float:
    """Minimizer of ``v (alpha - z)^2 + p_lambda(|alpha|)``.

    For ``v = 1``: zero when ``|z| <= lam/2``, soft-thresholding up to
    ``1.5 lam``, a linear blend up to ``a lam``, identity beyond. The problem
    is convex whenever ``2 v (a - 1) > 1``.
    """
    t = abs(z)
    if t <= lam / (2 * v):
        return 0.0
    if t <= lam + lam / (2 * v):
        r = t - lam / (2 * v)
    elif t <= a * lam:
        r = (2 * v * (a - 1) * t - a * lam) / (2 * v * (a - 1) - 1)
    else:
        r = t
    return float(np.copysign(r, z))


def scad_fit(X: np.ndarray, y: np.ndarray, lam: float, opts: SelectOptions = SelectOptions(), start=None):
    """Solve the SCAD-penalized least-squares estimating equations.

    ``X`` must be centered with unit-variance columns and ``y`` centered
    (the intercept is unpenalized). The score ``(2/n) X'(y - X alpha)`` is
    matched to ``q_lambda(|alpha|) sgn(alpha)`` by cyclic coordinate descent,
    whose fixed points are exactly the solutions of that system. Returns the
    slope vector after hard-thresholding.
    """
    n, d = X.shape
    G = X.T @ X / n
    c = X.T @ y / n
    if lam <= 0:
        return np.linalg.lstsq(G, c, rcond=None)[0]
    alpha = np.zeros(d) if start is None else np.array(start, dtype=float)
    for _ in range(opts.max_iter):
        change = 0.0
        for j in range(d):
            z = alpha[j] + (c[j] - G[j] @ alpha) / G[j, j]
            new = scad_threshold(z, lam, opts.a, G[j, j])
            change = max(change, abs(new - alpha[j]))
            alpha[j] = new
        if change <= opts.tol:
            break
    else:
        raise NoConvergence(f"SCAD iterations did not converge at lambda = {lam:.4g}")
    alpha[np.abs(alpha) < opts.threshold] = 0.0
    return alpha


def lambda_max(X: np.ndarray, y: np.ndarray) -> float:
    """Smallest penalty at which ``alpha = 0`` satisfies the stationarity system."""
    return float(np.max(np.abs(2 * X.T @ y / X.shape[0]))) if X.shape[1] else 0.0


def stationarity_gap(X, y, alpha, lam, a: float = SCAD_A) -> float:
    """Max over nonzero coordinates of ``|score_j - q(|alpha_j|) sgn(alpha_j)|``."""
    nz = alpha != 0
    if not nz.any():
        return 0.0
    score = 2 * X.T @ (y - X @ alpha) / X.shape[0]
    return float(np.max(np.abs(score[nz] - scad_penalty_deriv(np.abs(alpha[nz]), lam, a) * np.sign(alpha[nz]))))


def penalized_select(
    sample: Sample,
    lambda_grid: Optional[Sequence[float]] = None,
    opts: SelectOptions = SelectOptions(),
) -> SelectionResult:
    """Select outcome-model covariates among respondents by SCAD with BIC tuning.

    The criterion is ``N1 log(RSS/N1) + |M| log N1``. Without a grid, a
    geometric one runs from the smallest penalty that zeroes every slope
    down by a factor ``opts.grid_ratio``.
    """
    validate(sample)
    columns = tuple(range(sample.d)) if opts.columns is None else tuple(opts.columns)
    X = sample.X_resp[:, list(columns)]
    y = sample.y_resp
    n1, d = X.shape
    if n1 < d + 2:
        raise RankDeficient(f"need at least {d + 2} respondents for {d} candidate covariates, got {n1}")
    check_rank(with_intercept(X), "respondent covariates")
    xm, ym = X.mean(axis=0), y.mean()
    Xc = X - xm
    # penalize on the unit-variance scale; report on the original one
    scale = Xc.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Xs = Xc / scale
    yc = y - ym
    if lambda_grid is None:
        top = lambda_max(Xs, yc)
        lambda_grid = top * np.geomspace(1.0, opts.grid_ratio, opts.n_grid) if top > 0 else [0.0]
    grid = [float(v) for v in lambda_grid]

    def fit(lam):
        alpha = scad_fit(Xs, yc, lam, opts)
        rss = float(np.sum((yc - Xs @ alpha) ** 2))
        k = int(np.count_nonzero(alpha))
        crit = n1 * np.log(max(rss, 1e-300) / n1) + k * np.log(n1)
        return alpha, PathPoint(lam, crit, tuple(np.flatnonzero(alpha).tolist()), rss)

    if opts.threads and opts.threads > 1:
        with ThreadPoolExecutor(opts.threads) as pool:
            fits = list(pool.map(fit, grid))
    else:
        fits = [fit(lam) for lam in grid]
    # ties go to the larger penalty, which comes first in a decreasing grid
    best = min(range(len(fits)), key=lambda i: (fits[i][1].criterion, -grid[i]))
    alpha_s, point = fits[best]
    alpha = alpha_s / scale
    intercept = float(ym - xm @ alpha)
    logger.info("SCAD selected %s at lambda %.4g", point.support, point.lam)
    return SelectionResult(point.support, alpha, intercept, point.lam, tuple(p for _, p in fits), columns)


def two_stage_sps(
    sample: Sample,
    select_opts: SelectOptions = SelectOptions(),
    estfun: Optional[EstimatingFunction] = None,
    solver: SolverOptions = SolverOptions(),
    lambda_grid: Optional[Sequence[float]] = None,
    names: Optional[Sequence[str]] = None,
) -> EstimateResult:
    """Select covariates by SCAD, then calibrate on the selected ones.

    The variance is the linearization variance of the second stage, treating
    the selected set as fixed.
    """
    sel = penalized_select(sample, lambda_grid, select_opts)
    cols = list(sel.selected_columns)
    if cols:
        design = BalancingDesign.linear(cols, None if names is None else [names[j] for j in cols])
    else:
        design = BalancingDesign.intercept_only()
    res = sps_with_variance(sample, design, estfun, solver)
    res.method = "two-stage"
    res.diagnostics["selected"] = cols
    res.diagnostics["scad_lambda"] = sel.lam
    res.diagnostics["selection"] = sel
    return res
