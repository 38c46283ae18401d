import numpy as np
import pytest

from fracobstacle import cli
from fracobstacle.config import dumps, resolve


def _run(tmp_path, *args):
    return cli.main(list(args) + ["--out", str(tmp_path)])


def test_solve_then_analyze(tmp_path, capsys):
    assert _run(tmp_path, "solve") == cli.EXIT_OK
    assert (tmp_path / "trajectory.csv").is_file()
    report = (tmp_path / "report.txt").read_text()
    assert "max_beta" in report and "# band" in report
    assert _run(tmp_path, "analyze") == cli.EXIT_OK
    header = (tmp_path / "regularity_report.csv").read_text().splitlines()[0]
    assert header == "quantity,value,band,range_used,pass"


def test_one_dimensional_solve_is_flagged_outside_theory(tmp_path, capsys):
    assert _run(tmp_path, "solve", "--T", "0.1") == cli.EXIT_OK
    assert "INFO dimension: 1" in capsys.readouterr().out
    assert "d = 1 is outside the theory" in (tmp_path / "report.txt").read_text()


def test_solve_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(a, "solve", "--T", "0.2") == cli.EXIT_OK
    assert _run(b, "solve", "--T", "0.2") == cli.EXIT_OK
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()


def test_validate_ops_writes_passing_table(tmp_path):
    assert _run(tmp_path, "validate-ops") == cli.EXIT_OK
    lines = (tmp_path / "validate_ops.csv").read_text().splitlines()
    assert lines[0] == "operator,test,error,tolerance,pass"
    assert all(line.endswith("true") for line in lines[1:])


def test_eigcheck(tmp_path):
    assert _run(tmp_path, "eigcheck", "--s", "0.6", "0.75") == cli.EXIT_OK
    assert len((tmp_path / "eigcheck.csv").read_text().splitlines()) == 3


@pytest.mark.parametrize("check", ["symbol", "heat", "duhamel"])
def test_oracle_tables(tmp_path, check):
    assert _run(tmp_path, "oracle", "--check", check) == cli.EXIT_OK
    assert (tmp_path / f"oracle_{check}.csv").is_file()


def test_missing_config_exits_with_config_error(tmp_path, capsys):
    assert _run(tmp_path, "solve", "--config", str(tmp_path / "absent.cfg")) == cli.EXIT_CONFIG
    assert "not found" in capsys.readouterr().err


def test_sigma_above_s_exits_with_config_error(tmp_path, capsys):
    cfg = resolve("put1d")
    cfg.operator.sigma = 0.8
    path = tmp_path / "bad.cfg"
    path.write_text(dumps(cfg))
    assert _run(tmp_path, "solve", "--config", str(path)) == cli.EXIT_CONFIG
    assert "(iv)" in capsys.readouterr().err


def test_unknown_key_exits_with_config_error(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[grid]\nwidth = 3\n")
    assert _run(tmp_path, "solve", "--config", str(path)) == cli.EXIT_CONFIG


def test_unstable_projected_step_aborts(tmp_path, capsys):
    assert _run(tmp_path, "solve", "--scheme", "projected", "--dt", "0.2") == cli.EXIT_ABORT
    assert "stability" in capsys.readouterr().err


@pytest.mark.parametrize("value", ["zero", "0", "-2"])
def test_bad_thread_count_is_a_config_error(tmp_path, monkeypatch, value):
    monkeypatch.setenv("FRACOBSTACLE_THREADS", value)
    assert _run(tmp_path, "eigcheck", "--s", "0.75") == cli.EXIT_CONFIG


def test_thread_count_default(monkeypatch):
    monkeypatch.delenv("FRACOBSTACLE_THREADS", raising=False)
    assert cli.thread_count() == 1


def test_all_csv_outputs_are_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert _run(out, "run") == cli.EXIT_OK
        assert _run(out, "sweep") == cli.EXIT_OK
    names = sorted(p.name for p in a.glob("*.csv"))
    assert "summary.csv" in names and "sweep.csv" in names
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_run_put1d_end_to_end(tmp_path):
    assert _run(tmp_path, "run") == cli.EXIT_OK
    summary = (tmp_path / "summary.csv").read_text().splitlines()
    assert len(summary) > 1
    traj = np.loadtxt(tmp_path / "trajectory.csv", delimiter=",", skiprows=1)
    assert np.all(np.isfinite(traj))
