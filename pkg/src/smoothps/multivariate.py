"""Smoothed propensity weights under arbitrary multivariate missingness.

Units are partitioned by which outcome components they observe. Complete
cases (pattern 1) are tilted towards every other pattern separately, each
with a log-linear density ratio in that pattern's observed variables, and
the per-pattern ratios add up to one weight per complete case.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .calibration import SolverOptions, fit_tilt
from .data import BalancingDesign, EstimatingFunction, MultiSample, Standardization, check_rank, mean_function, with_intercept
from .errors import Infeasible, NoCompleteCases, NumericalError
from .estimators import EstimateResult, solve_weighted, weighted_least_squares
from .inference import sandwich

logger = logging.getLogger(__name__)


def pattern_mask(observed_row) -> int:
    """Bitmask with bit ``j`` set when outcome ``j`` is observed."""
    return int(sum(1 << j for j, o in enumerate(observed_row) if o))


def mask_columns(mask: int, p: int) -> tuple:
    return tuple(j for j in range(p) if mask >> j & 1)


@dataclass(frozen=True, eq=False)
class PatternPartition:
    masks: tuple  # one bitmask per pattern; masks[0] is the complete pattern
    membership: np.ndarray  # pattern index per unit
    counts: tuple
    p: int
    # observed outcome columns each pattern's design may use; narrower than
    # the mask after a small pattern is merged into a coarser one
    design_columns: tuple = field(default=())
    merged: tuple = field(default=())  # (mask, absorbing mask) pairs

    @property
    def T(self) -> int:
        return len(self.masks)

    @property
    def n(self) -> int:
        return len(self.membership)

    def rows(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.membership == t)

    def report(self) -> dict:
        return {str(m): int(c) for m, c in zip(self.masks, self.counts)}


def _ordered(masks, counts, full):
    rest = sorted((m for m in masks if m != full), key=lambda m: (-counts[m], m))
    return [full] + rest


def partition_patterns(ms: MultiSample, min_extra: Optional[int] = None) -> PatternPartition:
    """Partition units by observed-outcome pattern.

    The complete pattern comes first, the rest by descending count (ties by
    bitmask). When ``min_extra`` is given, a pattern with fewer than
    ``L + min_extra`` units, ``L`` being the number of its default balancing
    functions, is merged into the largest existing pattern observing a strict
    subset of its outcomes, with a warning.
    """
    p = ms.p
    full = (1 << p) - 1
    unit_masks = np.array([pattern_mask(row) for row in ms.observed], dtype=np.int64)
    if not np.any(unit_masks == full):
        raise NoCompleteCases("no unit observes every outcome")
    values, cnt = np.unique(unit_masks, return_counts=True)
    counts = {int(m): int(c) for m, c in zip(values, cnt)}
    assign = {m: m for m in counts}  # original mask -> absorbing mask
    merged = []
    if min_extra is not None:
        changed = True
        while changed:
            changed = False
            current = {}
            for m, a in assign.items():
                current[a] = current.get(a, 0) + counts[m]
            for m in sorted(current, key=lambda m: (current[m], m)):
                if m == full:
                    continue
                L = bin(m).count("1") + ms.d
                if current[m] >= L + min_extra:
                    continue
                coarser = [c for c in current if c != full and c != m and (c & m) == c]
                if not coarser:
                    continue
                target = max(coarser, key=lambda c: (bin(c).count("1"), current[c], -c))
                warnings.warn(f"pattern {m} has {current[m]} units; merged into pattern {target}")
                merged.append((m, target))
                for k, a in assign.items():
                    if a == m:
                        assign[k] = target
                changed = True
                break
    final = {}
    for m, a in assign.items():
        final[a] = final.get(a, 0) + counts[m]
    order = _ordered(final.keys(), final, full)
    index = {m: t for t, m in enumerate(order)}
    membership = np.array([index[assign[int(m)]] for m in unit_masks], dtype=np.int64)
    return PatternPartition(
        tuple(order),
        membership,
        tuple(final[m] for m in order),
        p,
        tuple(mask_columns(m, p) for m in order),
        tuple(merged),
    )


def default_design(partition: PatternPartition, t: int, d: int) -> BalancingDesign:
    """Linear in the pattern's observed outcomes, then every covariate.

    Columns refer to the stacked matrix ``[Y, X]``.
    """
    p = partition.p
    ycols = list(partition.design_columns[t])
    names = [f"y{j + 1}" for j in ycols] + [f"x{j + 1}" for j in range(d)]
    return BalancingDesign.linear(ycols + [p + j for j in range(d)], names)


@dataclass(frozen=True, eq=False)
class PatternFit:
    mask: int
    design: BalancingDesign
    lam: np.ndarray
    standardization: Standardization
    ratio_scale: float  # N_t / N_1
    iterations: int
    residual: float

    def log_ratio(self, V: np.ndarray) -> np.ndarray:
        return self.lam[0] + self.design.evaluate(V) @ self.lam[1:]


@dataclass(frozen=True, eq=False)
class PatternTilting:
    fits: tuple  # one per pattern t >= 2, in partition order
    n: int
    n1: int

    def ratios(self, V1: np.ndarray) -> list:
        """r_t over the complete cases, one array per pattern."""
        return [np.exp(f.log_ratio(V1)) for f in self.fits]

    @property
    def max_residual(self) -> float:
        return max((f.residual for f in self.fits), default=0.0)


def stacked(ms: MultiSample) -> np.ndarray:
    return np.column_stack([ms.Y, ms.Xmat]) if ms.d else ms.Y


def solve_pattern_tilting(
    partition: PatternPartition,
    ms: MultiSample,
    designs: Optional[Mapping[int, BalancingDesign]] = None,
    opts: SolverOptions = SolverOptions(),
    threads: int = 1,
) -> PatternTilting:
    """Tilt the complete cases towards each incomplete pattern.

    For pattern ``t`` the fitted ``phi`` satisfies ``N1^-1 sum_S1 r_t z =
    N_t^-1 sum_St z`` with ``z = (1, b_t)``. ``designs`` maps a pattern mask
    to its design over ``[Y, X]``; missing entries use :func:`default_design`.
    """
    V = stacked(ms)
    rows1 = partition.rows(0)
    n, n1 = partition.n, len(rows1)
    designs = dict(designs or {})

    def fit(t):
        mask = partition.masks[t]
        design = designs.get(mask) or default_design(partition, t, ms.d)
        rows = partition.rows(t)
        Bt = design.evaluate(V[rows])
        if not np.all(np.isfinite(Bt)):
            raise ValueError(f"design for pattern {mask} uses an unobserved variable")
        Z1 = with_intercept(design.evaluate(V[rows1]))
        Zt = with_intercept(Bt)
        try:
            check_rank(Z1, f"complete-case design for pattern {mask}")
            lam, std, it, res = fit_tilt(Z1, Zt, len(rows) / n, opts)
        except Infeasible as exc:
            raise Infeasible(str(exc), pattern=mask) from None
        except NumericalError as exc:
            raise type(exc)(f"pattern {mask}: {exc}") from None
        return PatternFit(mask, design, lam, std, len(rows) / n1, it, res)

    ts = range(1, partition.T)
    if threads and threads > 1 and partition.T > 2:
        with ThreadPoolExecutor(threads) as pool:
            fits = list(pool.map(fit, ts))
    else:
        fits = [fit(t) for t in ts]
    return PatternTilting(tuple(fits), n, n1)


def mv_weights(partition: PatternPartition, tilting: PatternTilting, ms: MultiSample) -> np.ndarray:
    """omega_i = 1 + sum_t (N_t/N_1) r_t(z_it) over complete cases."""
    V1 = stacked(ms)[partition.rows(0)]
    omega = np.ones(len(V1))
    for f in tilting.fits:
        omega = omega + f.ratio_scale * np.exp(f.lam[0] + f.design.evaluate(V1) @ f.lam[1:])
    return omega


def pattern_residuals(partition: PatternPartition, tilting: PatternTilting, ms: MultiSample) -> list:
    """Per-pattern max |N1^-1 sum_S1 r_t z - N_t^-1 sum_St z|."""
    V = stacked(ms)
    V1 = V[partition.rows(0)]
    out = []
    for t, f in enumerate(tilting.fits, start=1):
        Z1 = with_intercept(f.design.evaluate(V1))
        Zt = with_intercept(f.design.evaluate(V[partition.rows(t)]))
        r = np.exp(f.log_ratio(V1))
        out.append(float(np.max(np.abs(Z1.T @ r / len(V1) - Zt.mean(axis=0)))))
    return out


def mv_sps_estimate(
    ms: MultiSample,
    designs: Optional[Mapping[int, BalancingDesign]] = None,
    estfun: Optional[EstimatingFunction] = None,
    opts: SolverOptions = SolverOptions(),
    min_extra: Optional[int] = 2,
    threads: int = 1,
    variance: bool = True,
) -> EstimateResult:
    """Solve ``N^-1 sum_S1 omega_i U(theta; y_i, x_i) = 0``.

    ``estfun`` sees the full outcome vector of each complete case; it
    defaults to the means of all outcomes.
    """
    estfun = estfun or mean_function(p=ms.p)
    partition = partition_patterns(ms, min_extra)
    tilting = solve_pattern_tilting(partition, ms, designs, opts, threads)
    omega = mv_weights(partition, tilting, ms)
    rows1 = partition.rows(0)
    Y1, X1 = ms.Y[rows1], ms.Xmat[rows1]
    theta, it = solve_weighted(omega, X1, Y1, estfun, ms.n)
    diag = {
        "patterns": partition.report(),
        "merged": [list(m) for m in partition.merged],
        "iterations": [f.iterations for f in tilting.fits],
        "residual": tilting.max_residual,
        "theta_iterations": it,
    }
    res = EstimateResult(theta, "mv-ip", diagnostics=diag, weights=omega)
    res.diagnostics["partition"] = partition
    res.diagnostics["tilting"] = tilting
    if variance:
        res.cov = mv_linearized_variance(ms, partition, tilting, theta, estfun)
    return res


def mv_influence(ms, partition, tilting, theta_hat, estfun):
    """Bracketed linearization terms and ``tau``; see :func:`mv_linearized_variance`."""
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    V = stacked(ms)
    rows1 = partition.rows(0)
    V1 = V[rows1]
    Y1, X1 = ms.Y[rows1], ms.Xmat[rows1]
    U = estfun.eval(theta_hat, X1, Y1)
    d = np.zeros((ms.n, estfun.p))
    d[rows1] = U
    omega = np.ones(len(rows1))
    for t, f in enumerate(tilting.fits, start=1):
        r = np.exp(f.log_ratio(V1))
        Z1 = with_intercept(f.design.evaluate(V1))
        beta = weighted_least_squares(Z1, U, r).reshape(Z1.shape[1], -1)
        rows = partition.rows(t)
        d[rows] += with_intercept(f.design.evaluate(V[rows])) @ beta
        d[rows1] += (f.ratio_scale * r)[:, None] * (U - Z1 @ beta)
        omega = omega + f.ratio_scale * r
    tau = np.einsum("i,ijk->jk", omega, estfun.jac(theta_hat, X1, Y1)) / ms.n
    return d, tau


def mv_linearized_variance(ms, partition, tilting, theta_hat, estfun=None) -> np.ndarray:
    """Linearization variance for multivariate patterns.

    ``d_i = delta_i1 U_i + sum_t delta_it beta_t' z_it + delta_i1 sum_t
    (N_t/N_1) r_t (U_i - beta_t' z_it)`` with ``beta_t`` the ``r_t``-weighted
    least-squares fit of ``U`` on ``z_t`` over complete cases; the result is
    ``N^-1 tau^-1 S_dd tau^-T``.
    """
    estfun = estfun or mean_function(p=ms.p)
    d, tau = mv_influence(ms, partition, tilting, theta_hat, estfun)
    return sandwich(d, tau, ms.n)
