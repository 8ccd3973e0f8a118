"""CSV ingestion and report serialization.

Input CSV files carry a header row. Empty cells and ``NA`` mark missing
values; every other cell must parse as a float. JSON reports are written
with sorted keys and every float printed to 17 significant digits, so a
report read back compares equal and reruns are byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import MultiSample, Sample
from .errors import BadColumn, IoError, NonNumeric, ParseError

logger = logging.getLogger(__name__)

MISSING = ("", "NA")


@dataclass(frozen=True, eq=False)
class Table:
    header: tuple
    values: np.ndarray  # NaN where missing

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.index(name)]

    def index(self, name: str) -> int:
        try:
            return self.header.index(name)
        except ValueError:
            raise BadColumn(f"no column {name!r} in the input header") from None


def read_header(path) -> tuple:
    try:
        with open(path, newline="") as fh:
            row = next(csv.reader(fh), None)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror or exc}") from None
    if not row:
        raise ParseError("missing header row", 1)
    return tuple(h.strip() for h in row)


def read_table(path) -> Table:
    """Parse a numeric CSV file with a header row."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror or exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ParseError("missing header row", 1)
        header = tuple(h.strip() for h in header)
        if len(set(header)) != len(header):
            raise ParseError("duplicate column names in header", 1)
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", line)
            vals = []
            for name, cell in zip(header, row):
                cell = cell.strip()
                if cell in MISSING:
                    vals.append(math.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise NonNumeric(name, line) from None
                if not math.isfinite(v):
                    raise NonNumeric(name, line)
                vals.append(v)
            rows.append(vals)
    values = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return Table(header, values)


def resolve_covariates(header: Sequence[str], outcomes: Sequence[str], covariates=None, response=None) -> list:
    """Named covariates, or every column that is neither outcome nor response."""
    if covariates:
        for c in covariates:
            if c not in header:
                raise BadColumn(f"no column {c!r} in the input header")
        return list(covariates)
    skip = set(outcomes) | ({response} if response else set())
    return [h for h in header if h not in skip]


def load_csv(path, outcomes: Sequence[str], covariates: Optional[Sequence[str]] = None,
             response: Optional[str] = None):
    """Read a :class:`Sample` (one outcome) or :class:`MultiSample` (several).

    The response indicator comes from ``response`` when given, otherwise
    from whether the outcome cell is present. Covariates must be complete.
    """
    table = read_table(path)
    outcomes = list(outcomes)
    if not outcomes:
        raise BadColumn("at least one outcome column is required")
    for name in outcomes + ([response] if response else []):
        table.index(name)
    cov = resolve_covariates(table.header, outcomes, covariates, response)
    X = np.column_stack([table.column(c) for c in cov]) if cov else np.zeros((len(table.values), 0))
    bad = np.argwhere(~np.isfinite(X))
    if len(bad):
        i, j = bad[0]
        raise ParseError(f"missing covariate value in column {cov[j]!r}", int(i) + 2)
    Y = np.column_stack([table.column(c) for c in outcomes])
    n = len(Y)
    logger.info("read %d rows; missing rate %s", n,
                ", ".join(f"{c}={np.mean(np.isnan(Y[:, k])):.3f}" for k, c in enumerate(outcomes)))
    if len(outcomes) > 1:
        return MultiSample(Y, X if cov else None)
    y = Y[:, 0]
    if response:
        r = table.column(response)
        if np.any(~np.isin(r, (0.0, 1.0))):
            raise ParseError(f"response column {response!r} must hold 0 or 1")
        delta = r == 1.0
    else:
        delta = np.isfinite(y)
    return Sample(X, y, delta)


# ---------------------------------------------------------------------------
# Canonical JSON


def _float(v: float) -> str:
    if math.isnan(v):
        return "NaN"
    if math.isinf(v):
        return "Infinity" if v > 0 else "-Infinity"
    s = format(v, ".17g")
    if not any(ch in s for ch in ".eEn"):
        s += ".0"
    return s


def to_plain(obj):
    """Convert numpy containers and scalars to JSON-ready Python objects."""
    if isinstance(obj, dict):
        return {str(k): to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """Deterministic JSON: sorted keys, floats at 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {dumps(obj[k], indent, _level + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list)) for v in obj):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return _float(obj)
    return json.dumps(obj)


@dataclass(eq=True)
class Report:
    command: str
    version: str
    config: dict
    results: dict
    log: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return to_plain({
            "command": self.command,
            "version": self.version,
            "config": self.config,
            "results": self.results,
            "log": self.log,
        })

    def to_json(self) -> str:
        return dumps(self.to_dict()) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Report":
        d = json.loads(text)
        return cls(d["command"], d["version"], d["config"], d["results"], d.get("log", []))


def write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from None


def write_report(report: Report, path=None, tables: Optional[dict] = None, stream=None) -> None:
    """Write the JSON report (to ``stream`` when ``path`` is None) and any CSV tables.

    ``tables`` maps an output path to CSV text.
    """
    text = report.to_json()
    if path is None:
        if stream is not None:
            stream.write(text)
    else:
        write_text(path, text)
    for tpath, body in (tables or {}).items():
        write_text(tpath, body)
