"""Data-generating processes and the Monte Carlo driver."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import integrate, special, stats

from .data import BalancingDesign, MultiSample, Sample, mean_function
from .errors import SmoothPSError, TooManyFailures
from .estimators import estimate, known_ratio_estimate, true_pi_dr_estimate
from .inference import linearized_variance
from .multivariate import mv_sps_estimate

logger = logging.getLogger(__name__)

RESPONSE_MODELS = ("RM1", "RM2")
OUTCOME_MODELS = ("OR1", "OR2")
STUDIES = ("one", "two", "mv")


def replicate_seed(seed: int, index: int) -> np.random.SeedSequence:
    """Stream for replicate ``index``; independent of scheduling."""
    return np.random.SeedSequence(seed, spawn_key=(index,))


# ---------------------------------------------------------------------------
# Study one: four normal covariates, two response and two outcome models

RM1_COEF = np.array([1.0, -1.0, 0.5, 0.5, -0.25])
RM2_RATE = 0.6


def rm1_propensity(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return special.expit(RM1_COEF[0] + X @ RM1_COEF[1:])


@lru_cache(maxsize=None)
def rm1_response_rate() -> float:
    """P(delta = 1) under RM1: E expit(eta) with eta ~ N(0.5, 1.25^2)."""
    mean = RM1_COEF[0] + 2.0 * RM1_COEF[1:].sum()
    sd = float(np.sqrt(np.sum(RM1_COEF[1:] ** 2)))
    val, _ = integrate.quad(lambda z: special.expit(mean + sd * z) * stats.norm.pdf(z), -np.inf, np.inf,
                            epsabs=1e-13, epsrel=1e-13)
    return float(val)


def rm2_propensity(X) -> np.ndarray:
    x4 = np.asarray(X, dtype=float)[:, 3]
    a = RM2_RATE * stats.norm.pdf(x4, 3.0, 1.0)
    b = (1 - RM2_RATE) * stats.norm.pdf(x4, 1.0, 1.0)
    return a / (a + b)


def true_propensity(rm: str, X) -> np.ndarray:
    return rm1_propensity(X) if rm == "RM1" else rm2_propensity(X)


def population_odds(rm: str) -> float:
    """P(delta = 0) / P(delta = 1)."""
    p = rm1_response_rate() if rm == "RM1" else RM2_RATE
    return (1 - p) / p


def true_density_ratio(rm: str, X) -> np.ndarray:
    """f(x | delta = 0) / f(x | delta = 1), so that 1/pi = 1 + odds * r."""
    X = np.asarray(X, dtype=float)
    if rm == "RM2":
        return np.exp(4.0 - 2.0 * X[:, 3])
    return (1.0 / rm1_propensity(X) - 1.0) / population_odds("RM1")


def study_one_truth(rm: str, or_: str) -> float:
    """Population mean of y; analytic in every cell."""
    if or_ == "OR1":
        return 9.0
    # 1 + 0.5 E[x1 x2] + 0.5 E[x3^2] E[x4^2]
    ex4sq = 5.0 if rm == "RM1" else RM2_RATE * 10.0 + (1 - RM2_RATE) * 2.0
    return 1.0 + 0.5 * 4.0 + 0.5 * 5.0 * ex4sq


def gen_study_one(rm: str, or_: str, n: int, seed) -> Sample:
    if rm not in RESPONSE_MODELS or or_ not in OUTCOME_MODELS:
        raise ValueError(f"unknown model pair {rm}/{or_}")
    rng = np.random.default_rng(seed)
    if rm == "RM1":
        X = rng.normal(2.0, 1.0, (n, 4))
        delta = rng.random(n) < rm1_propensity(X)
    else:
        delta = rng.random(n) < RM2_RATE
        X = rng.normal(2.0, 1.0, (n, 4))
        X[:, 3] = rng.normal(np.where(delta, 3.0, 1.0), 1.0)
    e = rng.standard_normal(n)
    if or_ == "OR1":
        y = 1.0 + X.sum(axis=1) + e
    else:
        y = 1.0 + 0.5 * X[:, 0] * X[:, 1] + 0.5 * X[:, 2] ** 2 * X[:, 3] ** 2 + e
    return Sample(X, np.where(delta, y, np.nan), delta)


# ---------------------------------------------------------------------------
# Study two: correlated covariates and a misspecifiable response model

STUDY_TWO_MEAN = np.ones(3)
STUDY_TWO_COV = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.5], [0.0, 0.5, 1.0]])
STUDY_TWO_THETA = 0.5


def study_two_propensity(X, scenario: int) -> np.ndarray:
    phi = 0.0 if scenario == 1 else 1.0
    X = np.asarray(X, dtype=float)
    return special.expit(-X[:, 0] + phi * (X[:, 1] - 1.0) + X[:, 2])


def gen_study_two(scenario: int, n: int = 1000, seed=0) -> Sample:
    if scenario not in (1, 2):
        raise ValueError("scenario must be 1 or 2")
    rng = np.random.default_rng(seed)
    X = rng.multivariate_normal(STUDY_TWO_MEAN, STUDY_TWO_COV, size=n, method="cholesky")
    y = 1.0 + 0.5 * X[:, 0] - X[:, 1] + rng.standard_normal(n)
    u = rng.random(n)
    delta = u < study_two_propensity(X, scenario)
    return Sample(X, np.where(delta, y, np.nan), delta)


# ---------------------------------------------------------------------------
# Multivariate: y1 always seen, y2 and y3 missing at random given y1

MV_THETA = np.array([2.0, 2.5])  # means of y2 and y3
MV_RESPONSE = ((0.5, 1.0), (0.8, -0.8))  # logit P(y_k seen) = a + b (y1 - 1)


def mv_observation_prob(y1) -> np.ndarray:
    y1 = np.asarray(y1, dtype=float)
    return np.column_stack([special.expit(a + b * (y1 - 1.0)) for a, b in MV_RESPONSE])


def gen_multivariate(n: int, seed) -> MultiSample:
    rng = np.random.default_rng(seed)
    y1 = rng.normal(1.0, 1.0, n)
    y2 = 1.0 + y1 + rng.standard_normal(n)
    y3 = 1.0 + 0.5 * y1 + 0.5 * y2 + rng.standard_normal(n)
    seen = rng.random((n, 2)) < mv_observation_prob(y1)
    Y = np.column_stack([y1, y2, y3])
    observed = np.column_stack([np.ones(n, bool), seen])
    return MultiSample(np.where(observed, Y, np.nan))


# ---------------------------------------------------------------------------
# Configuration and metrics


@dataclass(frozen=True)
class MethodSpec:
    label: str
    method: str = "ip"  # ip, mle, cbps, ebps, dr, ratio, mv, cc
    columns: Optional[tuple] = None  # balancing covariates; all when None


@dataclass(frozen=True)
class SimConfig:
    study: str = "one"
    rm: str = "RM1"
    or_: str = "OR1"
    scenario: int = 1
    n: int = 1000
    reps: int = 1000
    seed: int = 0
    methods: tuple = ()
    variance: bool = True
    threads: int = 1
    max_failure_rate: float = 0.05

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ValueError(f"study must be one of {STUDIES}")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.n < 10:
            raise ValueError("n must be at least 10")
        if not self.methods:
            object.__setattr__(self, "methods", default_methods(self.study))

    def truth(self) -> np.ndarray:
        if self.study == "one":
            return np.array([study_one_truth(self.rm, self.or_)])
        if self.study == "two":
            return np.array([STUDY_TWO_THETA])
        return MV_THETA.copy()

    def generate(self, index: int):
        ss = replicate_seed(self.seed, index)
        if self.study == "one":
            return gen_study_one(self.rm, self.or_, self.n, ss)
        if self.study == "two":
            return gen_study_two(self.scenario, self.n, ss)
        return gen_multivariate(self.n, ss)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["methods"] = [asdict(m) for m in self.methods]
        return out


def default_methods(study: str) -> tuple:
    if study == "one":
        return tuple(MethodSpec(m.upper(), m) for m in ("ip", "mle", "cbps", "ebps"))
    if study == "two":
        return (MethodSpec("M1", "ip", (0, 1)), MethodSpec("M2", "ip", (0, 2)), MethodSpec("M3", "ip", (0, 1, 2)))
    return (MethodSpec("MV", "mv"), MethodSpec("CC", "cc"))


@dataclass(frozen=True)
class MetricsRow:
    method: str
    estimand: int
    theta0: float
    bias: float
    se: float
    rmse: float
    mean_var: float
    coverage: float
    n_ok: int
    failures: int
    max_residual: float


METRIC_FIELDS = tuple(MetricsRow.__dataclass_fields__)


@dataclass(eq=False)
class MetricsTable:
    rows: list
    estimates: dict = field(default_factory=dict)  # label -> (reps, p), NaN for failures
    variances: dict = field(default_factory=dict)
    config: Optional[SimConfig] = None

    def row(self, method: str, estimand: int = 0) -> MetricsRow:
        for r in self.rows:
            if r.method == method and r.estimand == estimand:
                return r
        raise KeyError((method, estimand))

    def to_records(self) -> list:
        return [asdict(r) for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, f)) for f in METRIC_FIELDS])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def summarize(label: str, est: np.ndarray, var: Optional[np.ndarray], theta0: np.ndarray,
              failures: int, max_residual: float = float("nan"), level: float = 0.95) -> list:
    """Bias, SE (divisor B), RMSE, mean variance and Wald coverage per component."""
    rows = []
    ok = np.all(np.isfinite(est), axis=1)
    e = est[ok]
    z = stats.norm.ppf(0.5 + level / 2)
    for k in range(est.shape[1]):
        err = e[:, k] - theta0[k]
        bias = float(err.mean()) if len(err) else float("nan")
        se = float(e[:, k].std(ddof=0)) if len(err) else float("nan")
        rmse = float(np.sqrt(np.mean(err ** 2))) if len(err) else float("nan")
        mean_var = coverage = float("nan")
        if var is not None:
            v = var[ok][:, k]
            good = np.isfinite(v)
            if good.any():
                mean_var = float(v[good].mean())
                half = z * np.sqrt(np.maximum(v[good], 0.0))
                coverage = float(np.mean(np.abs(err[good]) <= half))
        rows.append(MetricsRow(label, k, float(theta0[k]), bias, se, rmse, mean_var, coverage,
                               int(ok.sum()), failures, max_residual))
    return rows


def _fit(spec: MethodSpec, data, config: SimConfig):
    """Returns (theta, variance diagonal or None, balancing residual)."""
    if config.study == "mv":
        if spec.method == "cc":
            full = np.all(data.observed, axis=1)
            return data.Y[full][:, 1:].mean(axis=0), None, float("nan")
        res = mv_sps_estimate(data, estfun=mean_function([1, 2]), variance=config.variance)
        var = np.diag(res.cov) if res.cov is not None else None
        return res.theta, var, res.diagnostics["residual"]
    cols = tuple(range(data.d)) if spec.columns is None else tuple(spec.columns)
    design = BalancingDesign.linear(cols)
    if spec.method == "dr":
        pi = true_propensity(config.rm, data.X) if config.study == "one" else study_two_propensity(data.X, config.scenario)
        res = true_pi_dr_estimate(data, pi, design)
        return res.theta, None, float("nan")
    if spec.method == "ratio":
        res = known_ratio_estimate(data, true_density_ratio(config.rm, data.X))
        return res.theta, None, float("nan")
    res = estimate(data, design, spec.method)
    var = None
    if spec.method == "ip" and config.variance:
        var = np.diag(linearized_variance(data, design, res.tilting, res.theta))
    return res.theta, var, float(res.diagnostics.get("residual", float("nan")))


def run_monte_carlo(config: SimConfig) -> MetricsTable:
    """Run every configured method on ``config.reps`` generated datasets.

    Replicate ``b`` draws from the stream ``(seed, b)``, so results do not
    depend on thread count. Failed fits are excluded and counted; more than
    ``max_failure_rate`` failures for any method raises
    :class:`TooManyFailures`.
    """
    theta0 = config.truth()
    p = len(theta0)

    def one(b):
        data = config.generate(b)
        out = []
        for spec in config.methods:
            try:
                out.append(_fit(spec, data, config))
            except SmoothPSError as exc:
                logger.info("replicate %d, method %s failed: %s", b, spec.label, exc)
                out.append(None)
        return out

    if config.threads and config.threads > 1:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(one, range(config.reps)))
    else:
        results = [one(b) for b in range(config.reps)]

    rows, estimates, variances = [], {}, {}
    for m, spec in enumerate(config.methods):
        est = np.full((config.reps, p), np.nan)
        var = np.full((config.reps, p), np.nan)
        has_var = False
        resid = []
        for b, res in enumerate(results):
            if res[m] is None:
                continue
            theta, v, r = res[m]
            est[b] = theta
            if v is not None:
                var[b] = v
                has_var = True
            if np.isfinite(r):
                resid.append(r)
        failures = int(np.sum(~np.all(np.isfinite(est), axis=1)))
        if failures > config.max_failure_rate * config.reps:
            raise TooManyFailures(f"method {spec.label}: {failures} of {config.reps} replicates failed")
        max_res = float(max(resid)) if resid else float("nan")
        rows.extend(summarize(spec.label, est, var if has_var else None, theta0, failures, max_res))
        estimates[spec.label] = est
        if has_var:
            variances[spec.label] = var
    return MetricsTable(rows, estimates, variances, config)


def paired_variance_gap(a, b) -> tuple[float, float]:
    """``var(a) - var(b)`` over paired replicates and its Monte Carlo SE.

    Uses ``D_i = (a_i - mean a)^2 - (b_i - mean b)^2``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ok = np.isfinite(a) & np.isfinite(b)
    a, b = a[ok], b[ok]
    D = (a - a.mean()) ** 2 - (b - b.mean()) ** 2
    return float(D.mean()), float(D.std(ddof=1) / np.sqrt(len(D)))
