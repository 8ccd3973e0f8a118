import json
import os

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smoothps.cli import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main, parse_args
from smoothps.data import MultiSample, Sample
from smoothps.errors import BadColumn, IoError, MissingRequired, NonNumeric, ParseError, UnknownFlag
from smoothps.io import Report, dumps, load_csv, read_table, write_report
from smoothps.simulation import gen_multivariate, gen_study_one


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join("" if (isinstance(v, float) and np.isnan(v)) else repr(float(v)) for v in r) + "\n")
    return str(path)


@pytest.fixture
def data_csv(tmp_path):
    s = gen_study_one("RM1", "OR1", 300, 1)
    rows = np.column_stack([s.X, s.y])
    return write_csv(tmp_path / "d.csv", ["x1", "x2", "x3", "x4", "y"], rows)


@pytest.fixture
def mv_csv(tmp_path):
    ms = gen_multivariate(300, 2)
    return write_csv(tmp_path / "m.csv", ["y1", "y2", "y3"], ms.Y)


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


# ---------------------------------------------------------------------------
# CSV ingestion


def test_load_three_rows_with_missing_outcome(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y\n1,2\n2,3\n3,\n")
    s = load_csv(p, ["y"])
    assert isinstance(s, Sample) and s.delta.tolist() == [True, True, False]


def test_na_literal_is_missing(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y\n1,NA\n2,3\n")
    assert load_csv(p, ["y"]).delta.tolist() == [False, True]


def test_non_numeric_cell_reports_column_and_line(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y\n1,2\nabc,3\n")
    with pytest.raises(NonNumeric) as err:
        load_csv(p, ["y"])
    assert err.value.column == "x" and err.value.line == 3


def test_ragged_row_reports_line(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y\n1,2\n1,2,3\n")
    with pytest.raises(ParseError) as err:
        read_table(p)
    assert err.value.line == 3


def test_two_outcomes_give_multisample(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("y1,y2,x\n1,2,0\n1,,1\n")
    ms = load_csv(p, ["y1", "y2"])
    assert isinstance(ms, MultiSample) and ms.observed.tolist() == [[True, True], [True, False]]
    assert ms.d == 1


def test_explicit_response_column(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y,r\n1,2,1\n2,5,0\n3,4,1\n")
    s = load_csv(p, ["y"], response="r")
    assert s.delta.tolist() == [True, False, True] and s.d == 1


def test_missing_covariate_rejected(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y\n,2\n")
    with pytest.raises(ParseError):
        load_csv(p, ["y"])


def test_unknown_outcome_column(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y\n1,2\n")
    with pytest.raises(BadColumn):
        load_csv(p, ["z"])


def test_unreadable_file():
    with pytest.raises(IoError):
        read_table("/nonexistent/file.csv")


# ---------------------------------------------------------------------------
# Reports


def test_dumps_canonical():
    text = dumps({"b": 1.0, "a": [0.1, float("nan"), float("inf")], "c": None, "d": True})
    assert text.index('"a"') < text.index('"b"')
    assert "0.10000000000000001" in text and "NaN" in text and "Infinity" in text


@given(st.dictionaries(st.text(min_size=1, max_size=5),
                       st.one_of(st.floats(allow_nan=False), st.integers(-10**6, 10**6), st.text(max_size=8),
                                 st.lists(st.floats(allow_nan=False), max_size=4)),
                       max_size=6))
def test_report_round_trip(results):
    rep = Report("estimate", "0.1.0", {"seed": 1}, results, ["INFO x"])
    back = Report.from_json(rep.to_json())
    assert back == Report(rep.command, rep.version, rep.to_dict()["config"], rep.to_dict()["results"], rep.log)
    assert back.to_json() == rep.to_json()


def test_write_report_to_unwritable_path():
    with pytest.raises(IoError):
        write_report(Report("x", "0", {}, {}), "/nonexistent/dir/out.json")


# ---------------------------------------------------------------------------
# Argument parsing


def test_parse_valid_estimate(data_csv):
    cfg = parse_args(["estimate", "--data", data_csv, "--outcome", "y", "--balance", "x1,x2", "--method", "ip"])
    assert cfg.command == "estimate" and cfg.method == "ip" and cfg.balance == "x1,x2"
    assert cfg.ci_level == 0.95 and cfg.bootstrap_reps == 500


def test_unknown_method_is_unknown_flag(data_csv, capsys):
    with pytest.raises(UnknownFlag):
        parse_args(["estimate", "--data", data_csv, "--outcome", "y", "--method", "foo"])
    assert run_cli(capsys, "estimate", "--data", data_csv, "--outcome", "y", "--method", "foo")[0] == EXIT_USAGE


def test_unknown_option(capsys):
    assert run_cli(capsys, "estimate", "--bogus")[0] == EXIT_USAGE


def test_bad_balance_column(data_csv):
    with pytest.raises(BadColumn):
        parse_args(["estimate", "--data", data_csv, "--outcome", "y", "--balance", "z9"])


def test_missing_required(capsys):
    with pytest.raises(MissingRequired):
        parse_args(["estimate", "--outcome", "y"])
    assert run_cli(capsys, "eltest", "--data", "d.csv", "--outcome", "y")[0] == EXIT_USAGE


def test_missing_subcommand(capsys):
    assert run_cli(capsys)[0] == EXIT_USAGE


def test_config_file_precedence(tmp_path, data_csv):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"method": "ebps", "ci-level": 0.9, "bootstrap_reps": 20}))
    cfg = parse_args(["estimate", "--config", str(conf), "--data", data_csv, "--outcome", "y", "--ci-level", "0.8"])
    assert cfg.method == "ebps" and cfg.ci_level == 0.8 and cfg.bootstrap_reps == 20


def test_config_unknown_key(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"nope": 1}))
    assert run_cli(capsys, "simulate", "--config", str(conf))[0] == EXIT_USAGE


def test_config_not_json(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text("study = 'two'")
    assert run_cli(capsys, "simulate", "--config", str(conf))[0] == EXIT_USAGE


def test_threads_from_environment(monkeypatch):
    monkeypatch.setenv("SMOOTHPS_THREADS", "3")
    assert parse_args(["simulate"]).threads == 3
    assert parse_args(["simulate", "--threads", "0"]).threads == (os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# End-to-end runs


def test_estimate_report_fields(data_csv, capsys):
    code, out, _ = run_cli(capsys, "estimate", "--data", data_csv, "--outcome", "y")
    assert code == EXIT_OK
    rep = json.loads(out)
    for key in ("theta", "se", "ci", "residual", "iterations"):
        assert key in rep["results"]
    assert rep["results"]["residual"] <= 1e-10
    assert rep["config"]["method"] == "ip" and rep["config"]["tol"] == 1e-10
    lo, hi = rep["results"]["ci"][0]
    assert lo < rep["results"]["theta"][0] < hi


def test_every_subcommand_exits_zero(data_csv, mv_csv, tmp_path, capsys):
    runs = [
        ["estimate", "--data", data_csv, "--outcome", "y", "--method", "cbps", "--variance", "bootstrap",
         "--bootstrap-reps", "20"],
        ["estimate-mv", "--data", mv_csv, "--outcome", "y1,y2,y3"],
        ["varsel", "--data", data_csv, "--outcome", "y", "--n-grid", "10"],
        ["sdr", "--data", data_csv, "--outcome", "y", "--restarts", "1"],
        ["eltest", "--data", data_csv, "--outcome", "y", "--theta0", "9"],
        ["simulate", "--study", "two", "--reps", "4", "--table", str(tmp_path / "t.csv")],
    ]
    for argv in runs:
        code, out, err = run_cli(capsys, *argv)
        assert code == EXIT_OK, (argv, err)
        assert json.loads(out)["command"] == argv[0]


def test_numerical_failure_exit_code(tmp_path, capsys):
    p = write_csv(tmp_path / "bad.csv", ["x", "y"], [[0, 1], [1, 2], [2, np.nan], [3, np.nan]])
    code, _, err = run_cli(capsys, "estimate", "--data", p, "--outcome", "y")
    assert code == EXIT_NUMERICAL and "Infeasible" in err


def test_io_failure_exit_codes(tmp_path, data_csv, capsys):
    assert run_cli(capsys, "estimate", "--data", str(tmp_path / "none.csv"), "--outcome", "y")[0] == EXIT_IO
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\nfoo,1\n")
    assert run_cli(capsys, "estimate", "--data", str(bad), "--outcome", "y")[0] == EXIT_IO
    out = str(tmp_path / "no" / "dir.json")
    assert run_cli(capsys, "estimate", "--data", data_csv, "--outcome", "y", "--out", out)[0] == EXIT_IO


def test_linearized_variance_needs_ip(data_csv, capsys):
    assert run_cli(capsys, "estimate", "--data", data_csv, "--outcome", "y", "--method", "mle")[0] == EXIT_USAGE


def test_simulate_out_csv_writes_table_and_manifest(tmp_path, capsys):
    out = tmp_path / "table.csv"
    assert run_cli(capsys, "simulate", "--study", "two", "--reps", "3", "--out", str(out))[0] == EXIT_OK
    assert out.read_text().startswith("method,estimand,theta0,bias,se,rmse")
    manifest = json.loads((tmp_path / "table.json").read_text())
    assert manifest["results"]["failures"] == {"M1": 0, "M2": 0, "M3": 0}
    assert manifest["config"]["reps"] == 3


@pytest.mark.parametrize("argv", [
    ["estimate", "--outcome", "y", "--variance", "both", "--bootstrap-reps", "30", "--seed", "5"],
    ["sdr", "--outcome", "y", "--restarts", "2", "--seed", "3"],
    ["simulate", "--study", "two", "--reps", "5", "--seed", "9", "--threads", "3"],
], ids=["estimate", "sdr", "simulate"])
def test_reruns_byte_identical(argv, data_csv, tmp_path):
    path, dump = tmp_path / "r.json", tmp_path / "dump.csv"
    extra = ["--data", data_csv] if argv[0] != "simulate" else ["--dump", str(dump)]
    outs, dumps_ = [], []
    for _ in range(2):
        assert main(argv + extra + ["--out", str(path)]) == EXIT_OK
        outs.append(path.read_bytes())
        dumps_.append(dump.read_bytes() if dump.exists() else b"")
    assert outs[0] == outs[1]
    assert dumps_[0] == dumps_[1]


def test_module_entry_point(data_csv):
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "smoothps", "estimate", "--data", data_csv, "--outcome", "q"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE and "no column 'q'" in proc.stderr
