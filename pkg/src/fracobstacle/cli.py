"""Command-line runner: ``fracobstacle <subcommand> [--config PATH] [--out DIR] [--seed N]``.

Exit codes: 0 when every judged criterion holds, 1 when one fails, 2 on a
configuration error and 3 on a numerical abort.
"""

from __future__ import annotations

import os

# cap BLAS/FFT thread pools before numpy is imported anywhere
_THREADS = os.environ.get("FRACOBSTACLE_THREADS")
if _THREADS:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import csv  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import experiments as exp  # noqa: E402
from . import extension as ext  # noqa: E402
from . import regularity as reg  # noqa: E402
from .config import ConfigError, RunConfig, bundled_path, resolve  # noqa: E402
from .grid import read_trajectory_csv, write_trajectory_csv  # noqa: E402
from .penalty_solver import NumericalAbort, picard_solve  # noqa: E402

log = logging.getLogger("fracobstacle")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3


def thread_count() -> int:
    """Data-parallel width from ``FRACOBSTACLE_THREADS`` (default 1)."""
    raw = os.environ.get("FRACOBSTACLE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FRACOBSTACLE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("FRACOBSTACLE_THREADS must be a positive integer")
    return n


# -- output helpers --------------------------------------------------------------


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def _write_checks(path: Path, checks) -> None:
    _write_rows(path, ["quantity", "value", "band", "pass", "detail"],
                [(c.name, c.value, c.band, "" if c.passed is None else c.passed, c.detail) for c in checks])


def _verdict(checks) -> int:
    for c in checks:
        print(c.line())
    return EXIT_FAIL if any(c.passed is False for c in checks) else EXIT_OK


def _outdir(args, cfg: RunConfig | None) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output.dir if cfg else "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args) -> RunConfig:
    cfg = resolve(args.config) if args.config else resolve(bundled_path("put1d"))
    return cfg.validate()


def _mono_tol(cfg: RunConfig, report) -> float:
    if cfg.analysis.mono_tol is not None:
        return cfg.analysis.mono_tol
    if report.scheme == "imex":
        return 5 * report.dt * report.eps
    return 1e-12


# -- subcommands -----------------------------------------------------------------


def cmd_validate_ops(args) -> int:
    out = _outdir(args, None)
    rows = exp.operator_validation(seed=args.seed)
    _write_rows(out / "validate_ops.csv", ["operator", "test", "error", "tolerance", "pass"], rows)
    for r in rows:
        print(f"{'PASS' if r[4] else 'FAIL'} {r[0]} {r[1]}: {r[2]:.3g} (tol {r[3]:g})")
    return EXIT_OK if all(r[4] for r in rows) else EXIT_FAIL


def _solver_overrides(args) -> dict:
    over = {}
    for key in ("eps", "dt", "T", "snapshot_every", "snapshots"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    if getattr(args, "scheme", None):
        over["scheme"] = args.scheme
    return over


def _dimension_check(cfg: RunConfig):
    """Informative flag: the regularity theory assumes dimension at least 2."""
    band = "informative; d >= 2 assumed by the theory" if cfg.grid.dim >= 2 else "informative; d = 1 is outside the theory"
    return exp.Check("dimension", cfg.grid.dim, band, None)


def _solve_and_write(cfg: RunConfig, out: Path) -> tuple[list, object, object]:
    """Run the configured scheme, write snapshots and ``report.txt``; return checks, problem, report."""
    if cfg.solver.scheme == "picard":
        prob = cfg.problem()
        pc = cfg.penalty_config()
        res = picard_solve(prob, pc)
        checks = exp.picard_checks(res, pc) + [_dimension_check(cfg)]
        if cfg.output.write_snapshots:
            write_trajectory_csv(res.trajectory, out / "trajectory.csv")
        with open(out / "report.txt", "w") as fh:
            fh.write(f"scheme = picard\niterations = {len(res.residuals)}\n")
            for c in checks:
                fh.write(f"{c.name.replace(' ', '_')} = {c.value:.10g}  # band {c.band}\n")
            fh.write("residuals = " + ", ".join(f"{r:.4g}" for r in res.residuals) + "\n")
        return checks, prob, None
    prob, rep = exp.solve_config(cfg)
    if cfg.output.write_snapshots:
        write_trajectory_csv(rep.trajectory, out / "trajectory.csv")
    tol = _mono_tol(cfg, rep)
    psi_max = float(np.max(np.abs(prob.psi().values)))
    checks = [
        exp.Check("monotonicity_violation", rep.monotonicity_violation, f">= -{tol:.3g}",
                  rep.monotonicity_violation >= -tol),
        exp.Check("min_slack", rep.min_slack, f">= -{0.05 * psi_max:.3g}", rep.min_slack >= -0.05 * psi_max),
        exp.Check("max_beta", rep.max_beta, "informative", None),
        _dimension_check(cfg),
    ]
    with open(out / "report.txt", "w") as fh:
        fh.write(f"scheme = {rep.scheme}\n")
        fh.write(f"eps = {rep.eps if rep.eps is not None else 'none'}\n")
        fh.write(f"dt = {rep.dt:.10g}\nsteps = {len(rep.beta_history)}\nsnapshots = {len(rep.trajectory.times)}\n")
        fh.write(f"cfl_margin = {float(rep.cfl_margin):.6g}\n")
        for c in checks:
            fh.write(f"{c.name} = {c.value:.10g}  # band {c.band}\n")
        # wall time stays out of the CSV outputs so those are reproducible byte for byte
        fh.write(f"runtime_s = {rep.wall_time:.4g}  # band informative\n")
    return checks, prob, rep


def cmd_solve(args) -> int:
    cfg = _load(args)
    cfg = replace(cfg, solver=replace(cfg.solver, **_solver_overrides(args))).validate()
    out = _outdir(args, cfg)
    checks, _, _ = _solve_and_write(cfg, out)
    return _verdict(checks)


def _analyze(cfg: RunConfig, traj, out: Path, report=None) -> list:
    prob = cfg.problem()
    if traj.grid != prob.grid:
        raise ConfigError("trajectory grid does not match the configuration grid")
    psi = prob.psi()
    if report is not None:
        tol, mono_tol = report.contact_tol, _mono_tol(cfg, report)
    elif cfg.solver.scheme == "projected":
        tol, mono_tol = prob.grid.h ** (1 + prob.params.s), 1e-12
    else:
        tol = 10 * cfg.solver.eps
        dt = traj.dt if traj.dt > 0 else cfg.solver.eps / 4
        mono_tol = cfg.analysis.mono_tol if cfg.analysis.mono_tol is not None else 5 * dt * cfg.solver.eps
    rr = reg.analyze_trajectory(traj, psi, prob.params, prob.quad, contact_tol=tol, mono_tol=mono_tol)
    rr.write_csv(out / "regularity_report.csv")
    return [exp.Check(r.quantity, r.value, r.band or "informative", r.passed, r.range_used) for r in rr.rows]


def cmd_analyze(args) -> int:
    cfg = _load(args)
    out = _outdir(args, cfg)
    path = Path(args.trajectory) if args.trajectory else out / "trajectory.csv"
    if not path.is_file():
        raise ConfigError(f"trajectory file {str(path)!r} not found (run `solve` first or pass --trajectory)")
    prob = cfg.problem()
    traj = read_trajectory_csv(path, prob.obstacle)
    return _verdict(_analyze(cfg, traj, out))


def _extend(cfg: RunConfig, u_slice, report, out: Path) -> list:
    prob = cfg.problem()
    psi = prob.psi()
    tol = report.contact_tol if report is not None else prob.grid.h ** (1 + prob.params.s)
    check, mr, wb, wext = exp.monotonicity_formula_check(u_slice, psi, prob.params, prob.quad, tol)
    wext.write_csv(out / "w_extension.csv")
    mr.write_csv(out / "monotonicity.csv")
    return [check, exp.Check("w clipped nodes", wb.clipped, "informative", None)]


def cmd_extend(args) -> int:
    cfg = _load(args)
    out = _outdir(args, cfg)
    path = Path(args.trajectory) if args.trajectory else out / "trajectory.csv"
    if path.is_file():
        traj = read_trajectory_csv(path, cfg.problem().obstacle)
        report = None
    else:
        _, report = exp.solve_config(cfg)
        traj = report.trajectory
    return _verdict(_extend(cfg, traj.fields[-1], report, out))


def cmd_eigcheck(args) -> int:
    out = _outdir(args, None)
    s_values = tuple(args.s) if args.s else (0.6, 0.75, 0.9)
    checks = exp.halfsphere_checks(s_values)
    rows = []
    for s, c in zip(s_values, checks):
        rows.append((s, ext.halfsphere_rayleigh(2, s), ext.halfsphere_eigenvalue(2, s), c.value, c.passed))
    _write_rows(out / "eigcheck.csv", ["s", "rayleigh", "expected", "rel_error", "pass"], rows)
    return _verdict(checks)


def cmd_oracle(args) -> int:
    out = _outdir(args, None)
    rows = exp.oracle_table(args.check)
    keys = list(rows[0])
    _write_rows(out / f"oracle_{args.check}.csv", keys, [[r[k] for k in keys] for r in rows])
    for r in rows:
        print(", ".join(f"{k}={_fmt(v)}" for k, v in r.items()))
    if args.check == "symbol":
        return EXIT_OK if all(r["pass"] for r in rows) else EXIT_FAIL
    orders = [r["order"] for r in rows[1:]]
    want = 1.0 if args.check == "heat" else 2.0
    return EXIT_OK if all(o > want - 0.25 for o in orders) else EXIT_FAIL


def cmd_sweep(args) -> int:
    cfg = _load(args)
    out = _outdir(args, cfg)
    eps_values = tuple(args.eps_list) if args.eps_list else (cfg.analysis.eps_sweep or (0.1, 0.05, 0.025))
    prob = cfg.problem()
    sw = exp.eps_sweep(prob, eps_values, cfg.solver.T, workers=thread_count())
    _write_rows(out / "sweep.csv", ["eps", "dt", "oracle_distance", "max_beta", "monotonicity_violation",
                                    "nesting_violation"],
                [(r.eps, r.dt, r.distance, r.max_beta, r.monotonicity_violation, r.nesting)
                 for r in sw.rows])
    last = sw.rows[-1]
    checks = [
        exp.Check("oracle distance strictly decreasing", float(sw.strictly_decreasing), "== 1",
                  sw.strictly_decreasing, ", ".join(f"{d:.4g}" for d in sw.distances)),
        exp.Check("final oracle distance", last.distance, f"<= {0.05 * sw.psi_norm:.4g}",
                  last.distance <= 0.05 * sw.psi_norm),
        exp.Check("max beta variation", sw.beta_variation, "<= 0.2", sw.beta_variation <= 0.2),
    ]
    for r in sw.rows:
        tol = 5 * r.dt * r.eps
        checks.append(exp.Check(f"monotonicity eps={r.eps:g}", r.monotonicity_violation, f">= -{tol:.3g}",
                                r.monotonicity_violation >= -tol))
        checks.append(exp.Check(f"contact nesting eps={r.eps:g}", r.nesting, "<= 0.01", r.nesting <= 0.01))
    _write_checks(out / "sweep_summary.csv", checks)
    return _verdict(checks)


def cmd_run(args) -> int:
    """Solve, analyze and (when enabled) extend and eigcheck, judging every enabled criterion."""
    cfg = _load(args)
    out = _outdir(args, cfg)
    checks, prob, report = _solve_and_write(cfg, out)
    if report is not None and cfg.analysis.regularity:
        checks += _analyze(cfg, report.trajectory, out, report)
    if report is not None and cfg.analysis.extension:
        checks += _extend(cfg, report.trajectory.fields[-1], report, out)
    if cfg.analysis.eigcheck:
        checks += exp.halfsphere_checks()
    _write_checks(out / "summary.csv", checks)
    return _verdict(checks)


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="configuration file, or a bundled name: put1d, cafi, bump2d")
    common.add_argument("--out", help="output directory (default: the configuration's [output] dir)")
    common.add_argument("--seed", type=int, default=0, help="seed for randomized property checks")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fracobstacle", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("validate-ops", parents=[common], help="operator self-checks (validate_ops.csv)")
    s = sub.add_parser("solve", parents=[common], help="solve the configured problem")
    s.add_argument("--scheme", choices=("imex", "projected", "picard"))
    s.add_argument("--eps", type=float)
    s.add_argument("--dt", type=float)
    s.add_argument("--T", type=float)
    s.add_argument("--snapshot-every", type=int, dest="snapshot_every")
    s.add_argument("--snapshots", type=int, help="evenly spaced snapshot count (projected scheme)")
    a = sub.add_parser("analyze", parents=[common], help="regularity report of a trajectory CSV")
    a.add_argument("--trajectory", help="trajectory CSV (default: OUT/trajectory.csv)")
    e = sub.add_parser("extend", parents=[common], help="w-extension and monotonicity profile")
    e.add_argument("--trajectory", help="trajectory CSV (default: OUT/trajectory.csv, else solve)")
    g = sub.add_parser("eigcheck", parents=[common], help="half-sphere Rayleigh quotients")
    g.add_argument("--s", type=float, nargs="+")
    o = sub.add_parser("oracle", parents=[common], help="Fourier oracle error tables")
    o.add_argument("--check", choices=("symbol", "heat", "duhamel"), required=True)
    w = sub.add_parser("sweep", parents=[common], help="penalization sweep against the projected oracle")
    w.add_argument("--eps-list", type=float, nargs="+", dest="eps_list")
    sub.add_parser("run", parents=[common], help="solve, analyze and judge every enabled criterion")
    return p


COMMANDS = {
    "validate-ops": cmd_validate_ops,
    "solve": cmd_solve,
    "analyze": cmd_analyze,
    "extend": cmd_extend,
    "eigcheck": cmd_eigcheck,
    "oracle": cmd_oracle,
    "sweep": cmd_sweep,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        thread_count()
        code = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    log.info("%s finished in %.2f s", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
