"""Command-line interface.

Subcommands: ``estimate``, ``estimate-mv``, ``simulate``, ``varsel``, ``sdr``
and ``eltest``. Values from ``--config FILE.json`` replace built-in
defaults and explicit flags replace both. Exit status: 0 success, 1
numerical failure, 2 usage error, 3 input/output error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import __version__
from .calibration import SolverOptions
from .data import BalancingDesign, MultiSample, mean_function
from .errors import (
    BadColumn,
    InputError,
    IoError,
    MissingRequired,
    NumericalError,
    SmoothPSError,
    UnknownFlag,
    UsageError,
)
from .estimators import METHODS, estimate
from .inference import bootstrap_variance, el_ratio_test, linearized_variance
from .io import Report, load_csv, read_header, resolve_covariates, write_report
from .multivariate import mv_sps_estimate
from .sdr import SDROptions, kernel_sdr
from .selection import SelectOptions, two_stage_sps
from .simulation import MethodSpec, SimConfig, run_monte_carlo


logger = logging.getLogger("smoothps")

THREADS_ENV = "SMOOTHPS_THREADS"
EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
COMMANDS = ("estimate", "estimate-mv", "simulate", "varsel", "sdr", "eltest")


class _Parser(argparse.ArgumentParser):
    """Raises typed usage errors instead of exiting."""

    def error(self, message):
        if "unrecognized arguments" in message or "invalid choice" in message:
            raise UnknownFlag(message)
        if "required" in message:
            raise MissingRequired(message)
        raise UsageError(message)


def _csv_list(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def _default_threads() -> int:
    try:
        return int(os.environ.get(THREADS_ENV, "1"))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="smoothps", description="Smoothed propensity-score estimation for missing data.")
    p.add_argument("--version", action="version", version=f"smoothps {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON file of option defaults")
        sp.add_argument("--out", help="JSON report path (stdout when omitted)")
        sp.add_argument("--threads", type=int, default=_default_threads(),
                        help=f"worker threads, 0 = all cores (default from {THREADS_ENV})")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        if data:
            sp.add_argument("--data", help="input CSV with a header row")
            sp.add_argument("--covariates", type=_csv_list, help="covariate columns (default: all others)")
        sp.add_argument("--tol", type=float, default=1e-10)
        sp.add_argument("--max-iter", type=int, default=100)

    def outcome(sp):
        sp.add_argument("--outcome", help="outcome column")
        sp.add_argument("--response", help="0/1 response column (default: outcome present)")

    sp = sub.add_parser("estimate", help="point estimate and variance")
    common(sp)
    outcome(sp)
    sp.add_argument("--balance", help="balancing functions, e.g. x1,x2,x1*x2,x3^2 (default: covariates)")
    sp.add_argument("--method", default="ip", choices=METHODS)
    sp.add_argument("--variance", default="linearized", choices=["linearized", "bootstrap", "both", "none"])
    sp.add_argument("--bootstrap-reps", type=int, default=500)
    sp.add_argument("--ci-level", type=float, default=0.95)
    sp.add_argument("--odds", type=float, help="external P(delta=0)/P(delta=1) replacing N0/N1")

    sp = sub.add_parser("estimate-mv", help="multivariate missingness patterns")
    common(sp)
    sp.add_argument("--outcome", type=_csv_list, help="outcome columns")
    sp.add_argument("--ci-level", type=float, default=0.95)

    sp = sub.add_parser("simulate", help="Monte Carlo study")
    common(sp, data=False)
    sp.add_argument("--study", default="one", choices=["one", "two", "mv"])
    sp.add_argument("--rm", default="RM1", choices=["RM1", "RM2"])
    sp.add_argument("--or", dest="or_", default="OR1", choices=["OR1", "OR2"])
    sp.add_argument("--scenario", type=int, default=1, choices=[1, 2])
    sp.add_argument("--n", type=int, default=1000)
    sp.add_argument("--reps", type=int, default=1000)
    sp.add_argument("--methods", type=_csv_list,
                    help="study one: ip,mle,cbps,ebps,dr,ratio (default: the study's standard set)")
    sp.add_argument("--no-variance", dest="variance", action="store_false")
    sp.add_argument("--table", help="metrics CSV path")
    sp.add_argument("--dump", help="per-replicate estimates CSV path")

    sp = sub.add_parser("varsel", help="SCAD selection then two-stage estimate")
    common(sp)
    outcome(sp)
    sp.add_argument("--n-grid", type=int, default=40)
    sp.add_argument("--ci-level", type=float, default=0.95)

    sp = sub.add_parser("sdr", help="kernel sufficient dimension reduction")
    common(sp)
    outcome(sp)
    sp.add_argument("--dim", type=int, default=1)
    sp.add_argument("--restarts", type=int, default=5)
    sp.add_argument("--eps", type=float, default=1e-3)

    sp = sub.add_parser("eltest", help="empirical likelihood ratio test")
    common(sp)
    outcome(sp)
    sp.add_argument("--balance", help="balancing functions (default: covariates)")
    sp.add_argument("--theta0", type=float, help="hypothesized mean")
    sp.add_argument("--scope", default="full", choices=["full", "respondents"])
    return p


@dataclass(frozen=True)
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def echo(self) -> dict:
        """Effective configuration with defaults resolved."""
        return {"command": self.command, **{k: v for k, v in self.values.items() if k not in ("config", "log_level")}}


def _load_config(path) -> dict:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


_REQUIRED = {
    "estimate": ("data", "outcome"),
    "estimate-mv": ("data", "outcome"),
    "varsel": ("data", "outcome"),
    "sdr": ("data", "outcome"),
    "eltest": ("data", "outcome", "theta0"),
    "simulate": (),
}


def parse_args(argv: Optional[Sequence[str]] = None) -> RunConfig:
    """Parse and validate arguments; raises :class:`UsageError` subclasses."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.config:
        cfg = _load_config(ns.config)
        sub = parser._subparsers._group_actions[0].choices[ns.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise UnknownFlag(f"unknown config keys: {', '.join(unknown)}")
        # re-parse so explicit flags win over the file, which wins over defaults
        sub.set_defaults(**cfg)
        ns = parser.parse_args(argv)
    values = vars(ns).copy()
    command = values.pop("command")
    for key in _REQUIRED[command]:
        if values.get(key) in (None, [], ""):
            raise MissingRequired(f"{command}: --{key.replace('_', '-')} is required")
    if values.get("threads") == 0:
        values["threads"] = os.cpu_count() or 1
    if "data" in values and values.get("data"):
        _check_columns(command, values)
    return RunConfig(command, values)


def _check_columns(command, values):
    try:
        header = read_header(values["data"])
    except InputError:
        return  # reported when the data are loaded
    outcomes = values["outcome"] if isinstance(values["outcome"], list) else [values["outcome"]]
    for name in outcomes + [values.get("response")]:
        if name and name not in header:
            raise BadColumn(f"no column {name!r} in {values['data']}")
    cov = resolve_covariates(header, outcomes, values.get("covariates"), values.get("response"))
    if values.get("balance"):
        try:
            BalancingDesign.parse(values["balance"], cov)
        except KeyError as exc:
            raise BadColumn(f"no column {exc.args[0]!r} among the covariates") from None


# ---------------------------------------------------------------------------
# Commands


def _design(cfg: RunConfig, cov: list) -> BalancingDesign:
    if cfg.values.get("balance"):
        try:
            return BalancingDesign.parse(cfg.balance, cov)
        except KeyError as exc:
            raise BadColumn(f"no column {exc.args[0]!r} among the covariates") from None
    return BalancingDesign.linear(range(len(cov)), cov)


def _covariates(cfg: RunConfig, outcomes) -> list:
    header = read_header(cfg.data)
    return resolve_covariates(header, outcomes, cfg.values.get("covariates"), cfg.values.get("response"))


def _solver(cfg: RunConfig) -> SolverOptions:
    return SolverOptions(tol=cfg.tol, max_iter=cfg.max_iter, c=cfg.values.get("odds"))


def _estimate_block(res, level):
    out = {"theta": res.theta}
    if res.cov is not None:
        out["cov"] = res.cov
        out["se"] = res.se
        out["ci"] = res.ci(level)
    return out


def cmd_estimate(cfg: RunConfig) -> tuple:
    cov = _covariates(cfg, [cfg.outcome])
    sample = load_csv(cfg.data, [cfg.outcome], cov, cfg.response)
    design = _design(cfg, cov)
    solver = _solver(cfg)
    res = estimate(sample, design, cfg.method, opts=solver)
    results = {
        "method": cfg.method,
        "n": sample.n,
        "n_respondents": sample.n1,
        "balance": design.names,
        "theta": res.theta,
        "residual": res.diagnostics.get("residual"),
        "iterations": res.diagnostics.get("iterations"),
    }
    if res.tilting is not None:
        results["lambda"] = res.tilting.lam
    if cfg.variance in ("linearized", "both"):
        if cfg.method != "ip":
            raise UsageError("linearized variance is implemented for --method ip; use --variance bootstrap")
        res.cov = linearized_variance(sample, design, res.tilting, res.theta)
        results["linearized"] = _estimate_block(res, cfg.ci_level)
    if cfg.variance in ("bootstrap", "both"):
        boot = bootstrap_variance(sample, design, B=cfg.bootstrap_reps, seed=cfg.seed, method=cfg.method,
                                  threads=cfg.threads)
        res.cov = boot.cov
        results["bootstrap"] = {**_estimate_block(res, cfg.ci_level), "reps": boot.reps, "failures": boot.failures}
    block = results.get("linearized") or results.get("bootstrap") or {}
    for key in ("se", "ci"):
        if key in block:
            results[key] = block[key]
    return results, {}


def cmd_estimate_mv(cfg: RunConfig) -> tuple:
    cov = _covariates(cfg, cfg.outcome)
    ms = load_csv(cfg.data, cfg.outcome, cov)
    if not isinstance(ms, MultiSample):
        ms = MultiSample(ms.y, ms.X if ms.d else None)
    res = mv_sps_estimate(ms, opts=SolverOptions(tol=cfg.tol, max_iter=cfg.max_iter), threads=cfg.threads)
    results = {
        "outcomes": cfg.outcome,
        "n": ms.n,
        "patterns": res.diagnostics["patterns"],
        "merged": res.diagnostics["merged"],
        "residual": res.diagnostics["residual"],
        "iterations": res.diagnostics["iterations"],
        **_estimate_block(res, cfg.ci_level),
    }
    return results, {}


def cmd_simulate(cfg: RunConfig) -> tuple:
    methods = ()
    if cfg.values.get("methods"):
        methods = tuple(MethodSpec(m.upper(), m) for m in cfg.methods)
    sim = SimConfig(study=cfg.study, rm=cfg.rm, or_=cfg.or_, scenario=cfg.scenario, n=cfg.n, reps=cfg.reps,
                    seed=cfg.seed, methods=methods, variance=cfg.variance, threads=cfg.threads)
    table = run_monte_carlo(sim)
    results = {"metrics": table.to_records(), "simulation": sim.to_dict(),
               "failures": {r.method: r.failures for r in table.rows}}
    tables = {}
    out = cfg.values.get("out")
    if out and str(out).endswith(".csv"):
        tables[out] = table.to_csv()
    if cfg.values.get("table"):
        tables[cfg.table] = table.to_csv()
    if cfg.values.get("dump"):
        tables[cfg.dump] = _dump_csv(table)
    return results, tables


def _dump_csv(table) -> str:
    lines = ["replicate,method,estimand,estimate,variance"]
    for label, est in table.estimates.items():
        var = table.variances.get(label)
        for b in range(est.shape[0]):
            for k in range(est.shape[1]):
                v = var[b, k] if var is not None else float("nan")
                lines.append(f"{b},{label},{k},{format(est[b, k], '.17g')},{format(v, '.17g')}")
    return "\n".join(lines) + "\n"


def cmd_varsel(cfg: RunConfig) -> tuple:
    cov = _covariates(cfg, [cfg.outcome])
    sample = load_csv(cfg.data, [cfg.outcome], cov, cfg.response)
    res = two_stage_sps(sample, SelectOptions(n_grid=cfg.n_grid, threads=cfg.threads),
                        solver=SolverOptions(tol=cfg.tol, max_iter=cfg.max_iter), names=cov)
    sel = res.diagnostics["selection"]
    results = {
        "selected": [cov[j] for j in sel.selected_columns],
        "alpha": dict(zip(cov, sel.alpha)),
        "intercept": sel.intercept,
        "scad_lambda": sel.lam,
        "path": [{"lambda": p.lam, "bic": p.criterion, "support": [cov[j] for j in p.support]} for p in sel.path],
        "residual": res.diagnostics["residual"],
        **_estimate_block(res, cfg.ci_level),
    }
    return results, {}


def cmd_sdr(cfg: RunConfig) -> tuple:
    cov = _covariates(cfg, [cfg.outcome])
    sample = load_csv(cfg.data, [cfg.outcome], cov, cfg.response)
    proj = kernel_sdr(sample, cfg.dim, SDROptions(eps=cfg.eps, restarts=cfg.restarts, seed=cfg.seed,
                                                  threads=cfg.threads))
    results = {
        "covariates": cov,
        "W": proj.W,
        "objective": proj.objective,
        "sigma_x": proj.sigma_x,
        "sigma_y": proj.sigma_y,
        "eps": proj.eps,
        "converged": proj.converged,
        "grad_norm": proj.grad_norm,
        "history": [list(h) for h in proj.history],
    }
    return results, {}


def cmd_eltest(cfg: RunConfig) -> tuple:
    cov = _covariates(cfg, [cfg.outcome])
    sample = load_csv(cfg.data, [cfg.outcome], cov, cfg.response)
    design = _design(cfg, cov)
    test = el_ratio_test(sample, design, cfg.theta0, mean_function(), scope=cfg.scope)
    results = {
        "theta0": cfg.theta0,
        "theta_hat": test.theta_hat,
        "statistic": test.statistic,
        "p_value": test.p_value,
        "infeasible": test.infeasible,
        "df": 1,
    }
    return results, {}


HANDLERS = {
    "estimate": cmd_estimate,
    "estimate-mv": cmd_estimate_mv,
    "simulate": cmd_simulate,
    "varsel": cmd_varsel,
    "sdr": cmd_sdr,
    "eltest": cmd_eltest,
}


class _ListHandler(logging.Handler):
    def __init__(self):
        super().__init__(logging.INFO)
        self.records = []

    def emit(self, record):
        self.records.append(f"{record.levelname} {record.name}: {record.getMessage()}")


def run(cfg: RunConfig, stdout=None) -> int:
    stdout = stdout or sys.stdout
    capture = _ListHandler()
    logger.addHandler(capture)
    old_level = logger.level
    logger.setLevel(logging.INFO)
    try:
        results, tables = HANDLERS[cfg.command](cfg)
    finally:
        logger.removeHandler(capture)
        logger.setLevel(old_level)
    report = Report(cfg.command, __version__, cfg.echo(), results, capture.records)
    out = cfg.values.get("out")
    if cfg.command == "simulate" and out and str(out).endswith(".csv"):
        out = str(out)[:-4] + ".json"  # the metrics CSV took the requested path
    write_report(report, out, tables, stream=stdout)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cfg = parse_args(argv)
    except UsageError as exc:
        print(f"smoothps: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"smoothps: error: {exc}", file=sys.stderr)
        return EXIT_IO
    level = getattr(logging, cfg.log_level)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    for handler in logging.getLogger().handlers:
        handler.setLevel(level)
    try:
        return run(cfg)
    except UsageError as exc:
        print(f"smoothps: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"smoothps: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, SmoothPSError) as exc:
        print(f"smoothps: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
