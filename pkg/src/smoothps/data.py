"""Data containers, balancing designs and estimating functions."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import EmptyRespondents, MissingObservedOutcome, RankDeficient

RANK_RTOL = 1e-10


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Sample:
    """Covariates that are always observed, an outcome with holes, and the
    response indicator.

    ``delta`` is the authority on which outcomes exist. When it is omitted it
    is derived from the finite entries of ``y``. Entries of ``y`` at
    nonrespondents are never read.
    """

    X: np.ndarray
    y: np.ndarray
    delta: np.ndarray = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size == y.size and X.size else X.reshape(y.size, -1)
        if X.shape[0] != y.size:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.size} entries")
        if self.delta is None:
            delta = np.isfinite(y)
        else:
            delta = np.asarray(self.delta).reshape(-1).astype(bool)
            if delta.size != y.size:
                raise ValueError("delta and y differ in length")
        y = np.where(delta, y, np.nan)
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "delta", _frozen(delta, bool))

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def n1(self) -> int:
        return int(self.delta.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def X_resp(self) -> np.ndarray:
        return self.X[self.delta]

    @property
    def y_resp(self) -> np.ndarray:
        return self.y[self.delta]

    def take(self, index) -> "Sample":
        """Rows ``index`` (with repetition allowed) as a new sample."""
        index = np.asarray(index)
        return Sample(self.X[index], self.y[index], self.delta[index])

    def with_y(self, y) -> "Sample":
        return Sample(self.X, y, self.delta)


def validate(sample: Sample) -> None:
    if np.any(sample.delta & ~np.isfinite(sample.y)):
        i = int(np.flatnonzero(sample.delta & ~np.isfinite(sample.y))[0])
        raise MissingObservedOutcome(f"unit {i} is marked observed but has no outcome")
    if sample.n1 == 0:
        raise EmptyRespondents("no unit has an observed outcome")


@dataclass(frozen=True)
class Basis:
    name: str
    fn: Callable[[np.ndarray], np.ndarray] = field(compare=False)

    def __call__(self, X):
        return np.asarray(self.fn(X), dtype=float).reshape(-1)


def _column(j):
    return lambda X: X[:, j]


def _product(factors):
    def fn(X):
        out = np.ones(X.shape[0])
        for j, power in factors:
            out = out * X[:, j] ** power
        return out

    return fn


_TERM = re.compile(r"^\s*([A-Za-z_][\w.]*)\s*(?:\^\s*(\d+))?\s*$")


@dataclass(frozen=True)
class BalancingDesign:
    """Ordered basis functions b_1..b_L of the covariates.

    The realized design row for unit i is ``(1, b_1(x_i), ..., b_L(x_i))``.
    """

    terms: tuple = ()

    @property
    def L(self) -> int:
        return len(self.terms)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.terms]

    @classmethod
    def linear(cls, columns: Sequence[int], names: Optional[Sequence[str]] = None):
        columns = list(columns)
        if names is None:
            names = [f"x{j + 1}" for j in columns]
        return cls(tuple(Basis(str(nm), _column(int(j))) for j, nm in zip(columns, names)))

    @classmethod
    def intercept_only(cls):
        return cls(())

    @classmethod
    def parse(cls, spec: str | Sequence[str], columns: Sequence[str]):
        """Build a design from terms such as ``"x1,x2*x3,x4^2"``.

        ``columns`` names the covariate matrix columns in order. Unknown
        names raise ``KeyError`` carrying the offending name.
        """
        if isinstance(spec, str):
            spec = [s for s in spec.split(",") if s.strip()]
        index = {c: j for j, c in enumerate(columns)}
        terms = []
        for raw in spec:
            factors = []
            for part in raw.split("*"):
                m = _TERM.match(part)
                if m is None:
                    raise KeyError(part.strip())
                name, power = m.group(1), int(m.group(2) or 1)
                if name not in index:
                    raise KeyError(name)
                factors.append((index[name], power))
            if len(factors) == 1 and factors[0][1] == 1:
                fn = _column(factors[0][0])
            else:
                fn = _product(tuple(factors))
            terms.append(Basis(raw.strip(), fn))
        return cls(tuple(terms))

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if not self.terms:
            return np.zeros((X.shape[0], 0))
        return np.column_stack([t(X) for t in self.terms])

    def subset(self, keep: Sequence[int]) -> "BalancingDesign":
        return BalancingDesign(tuple(self.terms[k] for k in keep))


def with_intercept(B: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(B.shape[0]), B])


def numerical_rank(Z: np.ndarray, rtol: float = RANK_RTOL) -> int:
    if Z.size == 0:
        return 0
    s = np.linalg.svd(Z, compute_uv=False)
    return int(np.sum(s > rtol * s[0]))


def check_rank(Z: np.ndarray, what: str = "respondent design matrix") -> None:
    k = Z.shape[1]
    if Z.shape[0] < k or numerical_rank(Z) < k:
        raise RankDeficient(f"{what} has rank below {k}")


def design_matrix(sample: Sample, design: BalancingDesign, respondents_only: bool = False) -> np.ndarray:
    """Rows ``z_i = (1, b(x_i))``, optionally restricted to respondents.

    The respondent block is always rank-checked.
    """
    Z = with_intercept(design.evaluate(sample.X))
    check_rank(Z[sample.delta])
    return Z[sample.delta] if respondents_only else Z


@dataclass(frozen=True)
class Standardization:
    """Affine map between original design columns and standardized ones.

    ``b = center + scale * b_std``. The intercept column is left alone.
    """

    center: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, B: np.ndarray) -> "Standardization":
        if B.shape[1] == 0:
            return cls(np.zeros(0), np.ones(0))
        center = B.mean(axis=0)
        scale = B.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(center, scale)

    @classmethod
    def identity(cls, L: int) -> "Standardization":
        return cls(np.zeros(L), np.ones(L))

    def apply(self, B: np.ndarray) -> np.ndarray:
        return (B - self.center) / self.scale

    def to_original(self, lam_std: np.ndarray) -> np.ndarray:
        """Coefficients on ``(1, b)`` giving the same linear predictor as
        ``lam_std`` on ``(1, b_std)``."""
        slopes = lam_std[1:] / self.scale
        return np.concatenate([[lam_std[0] - slopes @ self.center], slopes])

    def to_standard(self, lam: np.ndarray) -> np.ndarray:
        slopes = lam[1:] * self.scale
        return np.concatenate([[lam[0] + lam[1:] @ self.center], slopes])

    def z_map(self) -> np.ndarray:
        """Matrix A with ``z = A @ z_std`` for design rows with intercept."""
        L = self.center.size
        A = np.eye(L + 1)
        A[1:, 0] = self.center
        A[1:, 1:] = np.diag(self.scale)
        return A


# ---------------------------------------------------------------------------
# Estimating functions


@dataclass(frozen=True)
class EstimatingFunction:
    """U(theta; x, y) evaluated row-wise.

    ``eval(theta, X, Y)`` returns an ``(m, p)`` array and ``jac(theta, X, Y)``
    an ``(m, p, p)`` array of dU/dtheta^T. ``Y`` is ``(m,)`` for a scalar
    outcome or ``(m, q)`` for several.
    """

    p: int
    eval: Callable = field(compare=False)
    jac: Callable = field(compare=False)
    name: str = "custom"
    linear: bool = False

    def start(self, X, Y, weights) -> np.ndarray:
        return np.zeros(self.p)


def _as_2d(Y):
    Y = np.asarray(Y, dtype=float)
    return Y.reshape(-1, 1) if Y.ndim == 1 else Y


def mean_function(columns: Optional[Sequence[int]] = None, p: Optional[int] = None) -> EstimatingFunction:
    """U = y - theta for the selected outcome columns (all by default)."""
    if columns is not None:
        columns = list(columns)
        p = len(columns)
    elif p is None:
        p = 1

    def select(Y):
        Y = _as_2d(Y)
        return Y if columns is None else Y[:, columns]

    def ev(theta, X, Y):
        return select(Y) - np.asarray(theta, dtype=float).reshape(1, -1)

    def jac(theta, X, Y):
        m = _as_2d(Y).shape[0]
        return np.broadcast_to(-np.eye(p), (m, p, p)).copy()

    return EstimatingFunction(p, ev, jac, name="mean", linear=True)


def indicator_le(j: int, k: int) -> EstimatingFunction:
    """U = 1(y_j <= y_k) - theta, estimating P(Y_j <= Y_k)."""

    def ev(theta, X, Y):
        Y = _as_2d(Y)
        return (Y[:, j] <= Y[:, k]).astype(float).reshape(-1, 1) - float(np.ravel(theta)[0])

    def jac(theta, X, Y):
        return -np.ones((_as_2d(Y).shape[0], 1, 1))

    return EstimatingFunction(1, ev, jac, name=f"P(y{j + 1}<=y{k + 1})", linear=True)


def regression_function(d: int) -> EstimatingFunction:
    """Least-squares coefficients of y on (1, x): U = x~ (y - x~' theta)."""

    def ev(theta, X, Y):
        Xt = with_intercept(np.asarray(X, dtype=float))
        y = _as_2d(Y)[:, 0]
        return Xt * (y - Xt @ theta)[:, None]

    def jac(theta, X, Y):
        Xt = with_intercept(np.asarray(X, dtype=float))
        return -Xt[:, :, None] * Xt[:, None, :]

    return EstimatingFunction(d + 1, ev, jac, name="regression", linear=True)


def stack(*funcs: EstimatingFunction) -> EstimatingFunction:
    """Concatenate estimating functions with disjoint parameter blocks."""
    sizes = [f.p for f in funcs]
    edges = np.cumsum([0] + sizes)

    def ev(theta, X, Y):
        theta = np.asarray(theta, dtype=float)
        return np.column_stack([f.eval(theta[a:b], X, Y) for f, a, b in zip(funcs, edges[:-1], edges[1:])])

    def jac(theta, X, Y):
        theta = np.asarray(theta, dtype=float)
        m = _as_2d(Y).shape[0]
        out = np.zeros((m, edges[-1], edges[-1]))
        for f, a, b in zip(funcs, edges[:-1], edges[1:]):
            out[:, a:b, a:b] = f.jac(theta[a:b], X, Y)
        return out

    return EstimatingFunction(
        int(edges[-1]), ev, jac, name="+".join(f.name for f in funcs), linear=all(f.linear for f in funcs)
    )


def jacobian_error(estfun: EstimatingFunction, theta, X, Y, h: float = 1e-6) -> float:
    """Max relative gap between ``jac`` and central differences of ``eval``."""
    theta = np.asarray(theta, dtype=float)
    J = estfun.jac(theta, X, Y)
    fd = np.zeros_like(J)
    for k in range(estfun.p):
        step = h * max(1.0, abs(theta[k]))
        e = np.zeros_like(theta)
        e[k] = step
        fd[:, :, k] = (estfun.eval(theta + e, X, Y) - estfun.eval(theta - e, X, Y)) / (2 * step)
    scale = np.maximum(np.abs(J), 1.0)
    return float(np.max(np.abs(J - fd) / scale))


# ---------------------------------------------------------------------------
# Multivariate outcomes


@dataclass(frozen=True, eq=False)
class MultiSample:
    """Outcome matrix with cell-level missingness, plus optional complete
    covariates."""

    Y: np.ndarray
    X: Optional[np.ndarray] = None
    observed: Optional[np.ndarray] = None

    def __post_init__(self):
        Y = np.array(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y.reshape(-1, 1)
        obs = np.isfinite(Y) if self.observed is None else np.asarray(self.observed, dtype=bool)
        if obs.shape != Y.shape:
            raise ValueError("observed mask must match Y")
        X = None
        if self.X is not None:
            X = np.array(self.X, dtype=float)
            if X.ndim == 1:
                X = X.reshape(-1, 1)
            if X.shape[0] != Y.shape[0]:
                raise ValueError("X and Y differ in rows")
            X = _frozen(X)
        object.__setattr__(self, "Y", _frozen(np.where(obs, Y, np.nan)))
        object.__setattr__(self, "observed", _frozen(obs, bool))
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def p(self) -> int:
        return self.Y.shape[1]

    @property
    def d(self) -> int:
        return 0 if self.X is None else self.X.shape[1]

    @property
    def Xmat(self) -> np.ndarray:
        return np.zeros((self.n, 0)) if self.X is None else self.X
