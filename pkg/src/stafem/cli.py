"""
Batch driver.

``stafem --experiment NAME [options]`` runs TAFEM or the ASTFEM-style
baseline and writes ``log.csv``, ``steps.csv`` and ``summary.json`` into
the output directory; ``stafem audit DIR`` re-checks a finished run from
those files.

Exit status: 0 completed (or audit passed), 1 audit failed, 2 input
error, 3 budget exhausted.
"""

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from stafem.adaptivity import AlgorithmParams, StepRecord, astfem_baseline, tafem
from stafem.errors import InputError, ResourceError, StafemError
from stafem.problems import PROBLEMS, get_problem
from stafem.vtk import write_vtk

EXIT_OK = 0
EXIT_AUDIT_FAILED = 1
EXIT_INPUT = 2
EXIT_BUDGET = 3

LOG_HEADER = ["Time", "DeltaT", "Dofs", "SpaceEstimate2", "CT-Estimate2", "D-Estimate2"]
STEP_FIELDS = [f.name for f in fields(StepRecord)]
_INT_FIELDS = {"n", "dofs", "A", "B", "C", "D"}

log = logging.getLogger("stafem")


@dataclass
class RunConfig:
    """Everything needed to reproduce one run."""

    experiment: str
    algorithm: str = "tafem"
    tol: float = 0.5
    split: str = "strict"
    out: Path = Path("stafem-out")
    params: dict = field(default_factory=dict)
    vtk_times: tuple = ()
    max_steps: Optional[int] = None
    max_dofs: Optional[int] = None
    max_wall: Optional[float] = None
    seed: int = 0

    def validate(self):
        if self.experiment not in PROBLEMS:
            raise InputError(f"unknown experiment {self.experiment!r}; choose from {sorted(PROBLEMS)}")
        if self.algorithm not in ("tafem", "astfem"):
            raise InputError("algorithm must be 'tafem' or 'astfem'")
        if not (isinstance(self.tol, (int, float)) and math.isfinite(self.tol) and self.tol > 0):
            raise InputError("TOL must be a positive number")

    def algorithm_params(self):
        values = dict(self.params)
        for name in ("max_steps", "max_dofs", "max_wall"):
            if getattr(self, name) is not None:
                values[name] = getattr(self, name)
        try:
            return AlgorithmParams(**values)
        except TypeError as err:
            raise InputError(str(err)) from None


def _num(x):
    """Locale independent, round-trip exact text for a float."""
    return format(float(x), ".17g")


def _json_value(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def write_outputs(run_log, out):
    """Write ``log.csv``, ``steps.csv`` and ``summary.json`` for a run log."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "log.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for r in run_log.steps:
            w.writerow([_num(r.t), _num(r.tau), str(r.dofs), _num(r.E_G), _num(r.E_ctau), _num(r.E_f)])
    with open(out / "steps.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STEP_FIELDS)
        for r in run_log.steps:
            row = asdict(r)
            w.writerow([str(row[k]) if k in _INT_FIELDS or k == "exit" else _num(row[k])
                        for k in STEP_FIELDS])
    summary = run_log.summary()
    flat = {k: _json_value(v) for k, v in summary.items() if k != "params"}
    flat.update({f"param_{k}": _json_value(v) for k, v in summary["params"].items()})
    (out / "summary.json").write_text(json.dumps(flat, indent=1, sort_keys=True) + "\n")


class _Snapshots:
    """VTK snapshot callback: writes the first step reaching each requested time."""

    def __init__(self, times, out):
        self.pending = sorted(float(t) for t in times)
        self.out = Path(out)
        self.count = 0

    def __call__(self, rec, slab):
        log.debug("step %d t=%.6g tau=%.3e dofs=%d", rec.n, rec.t, rec.tau, rec.dofs)
        while self.pending and rec.t >= self.pending[0] - 1e-12:
            target = self.pending.pop(0)
            path = self.out / f"snapshot_{self.count:03d}.vtk"
            write_vtk(path, slab.space.mesh, slab.u_end.vertex_values,
                      title=f"t={_num(rec.t)} requested={_num(target)}")
            self.count += 1


def run(config):
    """Execute a configured run and write its files; returns the exit status."""
    config.validate()
    params = config.algorithm_params()
    problem = get_problem(config.experiment)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    callback = _Snapshots(config.vtk_times, out)
    status = EXIT_OK
    try:
        if config.algorithm == "tafem":
            run_log = tafem(problem, config.tol, params, config.split, callback=callback)
        else:
            run_log = astfem_baseline(problem, config.tol, params, callback=callback)
    except ResourceError as err:
        run_log = err.partial
        status = EXIT_BUDGET
        log.warning("budget exhausted: %s", err)
    write_outputs(run_log, out)
    return status


# ---------------------------------------------------------------- audit


def _read_steps(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != STEP_FIELDS:
            raise InputError(f"{path}: unexpected columns")
        rows = []
        for row in reader:
            rows.append({k: (int(v) if k in _INT_FIELDS else v if k == "exit" else float(v))
                         for k, v in row.items()})
    return rows


def _read_log(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != LOG_HEADER:
            raise InputError(f"{path}: header must be {','.join(LOG_HEADER)}")
        return [[float(x) for x in row] for row in reader]


def audit_run(directory):
    """Re-check the invariants of a finished run from its files.

    Returns
    -------
    (bool, list of str)
        Overall verdict and one report line per check or violation.
    """
    d = Path(directory)
    for name in ("summary.json", "steps.csv", "log.csv"):
        if not (d / name).is_file():
            raise InputError(f"missing {d / name}")
    s = json.loads((d / "summary.json").read_text())
    steps = _read_steps(d / "steps.csv")
    rows = _read_log(d / "log.csv")
    report = []
    bad = []

    def fail(msg):
        bad.append(msg)
        report.append("FAIL " + msg)

    # the public log mirrors the full step table
    if len(rows) != len(steps):
        fail(f"log.csv has {len(rows)} rows, steps.csv {len(steps)}")
    for r, st in zip(rows, steps):
        if r != [st["t"], st["tau"], st["dofs"], st["E_G"], st["E_ctau"], st["E_f"]]:
            fail(f"step {st['n']}: log.csv row differs from steps.csv")
            break

    # time line
    t_prev = 0.0
    for st in steps:
        if not st["t"] > t_prev:
            fail(f"step {st['n']}: time {st['t']!r} does not increase")
        if abs(st["t"] - t_prev - st["tau"]) > 1e-12 * max(1.0, abs(st["t"])):
            fail(f"step {st['n']}: t_n - t_(n-1) = {st['t'] - t_prev!r} differs from tau = {st['tau']!r}")
        t_prev = st["t"]
    completed = s["status"] == "completed"
    if completed and (not steps or steps[-1]["t"] != s["T"]):
        fail(f"completed run ends at {t_prev!r} instead of T = {s['T']!r}")

    # per-step exit conditions
    algorithm = s["algorithm"]
    for st in steps:
        n = st["n"]
        if st["E_star"] > 0:
            fail(f"step {n}: E_* = {st['E_star']!r} > 0")
        if algorithm == "tafem":
            tol = s["tol_Gt"]
            if st["E_t"] > tol * tol:
                fail(f"step {n}: E_t = {st['E_t']!r} > tol_Gt^2 = {tol * tol!r}")
            slack = st["E_t"] + st["E_f"] + st["tau"] * tol
            for key in ("E_G", "E_c"):
                if st[key] > slack:
                    fail(f"step {n}: {key} = {st[key]!r} > E_t + E_f + tau tol_Gt = {slack!r}")
            if st["E_f"] > s["tol_f2"]:
                fail(f"step {n}: E_f = {st['E_f']!r} > tol_f^2 = {s['tol_f2']!r}")
        else:
            thr_gt = s["threshold_TOLGt_tilde2"] * st["tau"]
            if st["E_f"] > s["threshold_TOLf_tilde2"] * st["tau"]:
                fail(f"step {n}: E_f above tau TOL_f~^2")
            if st["exit"] == "standard":
                for key in ("E_t", "E_G", "E_c"):
                    if st[key] > thr_gt:
                        fail(f"step {n}: {key} = {st[key]!r} > tau TOL_Gt~^2 = {thr_gt!r}")
            elif st["tau"] > s["tau_star"] * (1 + 1e-12):
                fail(f"step {n}: nonstandard exit with tau = {st['tau']!r} > tau_* = {s['tau_star']!r}")

    # discrete energy balance on every slab
    for st in steps:
        lhs = st["dt_l2"] + st["jump2"] + st["end2"] - st["pi_minus2"]
        scale = max(1.0, st["fbar2"] + st["pi_minus2"] + st["end2"])
        if lhs > st["fbar2"] + 1e-8 * scale:
            fail(f"step {st['n']}: slab energy balance violated ({lhs!r} > {st['fbar2']!r})")
    breaks = s.get("coefficient_breaks", 0)
    if not breaks and steps:
        acc = 0.0
        bound0 = s["f_norm2"] + s["U0_energy2"]
        for st in steps:
            acc += 0.5 * st["dt_l2"] + st["jump2"]
            rhs = bound0 - st["end2"]
            if acc > rhs + 1e-8 * max(1.0, bound0):
                fail(f"step {st['n']}: cumulative energy estimate violated ({acc!r} > {rhs!r})")
                break
    report.append(f"checked {len(steps)} steps of a {algorithm} run ({s['status']})")

    # global budgets only make sense for a finished run
    if completed:
        if s["E_0"] > s["TOL0_2"]:
            fail(f"E_0 = {s['E_0']!r} > TOL_0^2 = {s['TOL0_2']!r}")
        if algorithm == "tafem":
            if s["sum_E_f"] > s["TOLf_2"]:
                fail(f"sum E_f = {s['sum_E_f']!r} > TOL_f^2 = {s['TOLf_2']!r}")
            cap = s["TOLGt_2"] + 2 * s["TOLf_2"]
            if s["sum_E_G_E_ctau"] > cap:
                fail(f"sum (E_G + E_ctau) = {s['sum_E_G_E_ctau']!r} > TOL_Gt^2 + 2 TOL_f^2 = {cap!r}")
            total_cap = s["TOL0_2"] + 3 * s["TOLf_2"] + s["TOLGt_2"]
            if s["total_estimate"] > total_cap:
                fail(f"total estimate {s['total_estimate']!r} > {total_cap!r}")
        else:
            cap = s["threshold_TOLf_tilde2"] * s["T"]
            if s["sum_E_f"] > cap * (1 + 1e-12):
                fail(f"sum E_f = {s['sum_E_f']!r} > T TOL_f~^2 = {cap!r}")
        report.append("global budgets checked")
    else:
        report.append(f"partial run ({s['status']}): global budgets skipped")
    if not bad:
        report.append("PASS")
    return not bad, report


# ---------------------------------------------------------------- entry point


def _times(text):
    if not text:
        return ()
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected a comma separated list of times") from None


def _param(text):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError("expected KEY=VALUE")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def _run_parser():
    p = argparse.ArgumentParser(prog="stafem", description="Space-time adaptive FEM for parabolic problems.")
    p.add_argument("--experiment", required=True, choices=sorted(PROBLEMS))
    p.add_argument("--algorithm", default="tafem", choices=["tafem", "astfem"])
    p.add_argument("--tol", type=float, default=0.5)
    p.add_argument("--split", default="strict", choices=["strict", "paper-numerics"])
    p.add_argument("--out", type=Path, default=Path("stafem-out"))
    p.add_argument("--max-steps", type=int)
    p.add_argument("--max-dofs", type=int)
    p.add_argument("--max-wall", type=float, help="wall-clock cap in seconds")
    p.add_argument("--vtk-times", type=_times, default=(), help="comma separated snapshot times")
    p.add_argument("--param", type=_param, action="append", default=[],
                   help="algorithm parameter override KEY=VALUE (repeatable)")
    p.add_argument("--seed", type=int, default=0, help="recorded only; the solver is deterministic")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _audit_parser():
    p = argparse.ArgumentParser(prog="stafem audit", description="Re-check a finished run.")
    p.add_argument("directory", type=Path)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        if argv[:1] == ["audit"]:
            args = _audit_parser().parse_args(argv[1:])
            ok, report = audit_run(args.directory)
            print("\n".join(report))
            return EXIT_OK if ok else EXIT_AUDIT_FAILED
        if argv[:1] == ["run"]:
            argv = argv[1:]
        args = _run_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.DEBUG)
        config = RunConfig(args.experiment, args.algorithm, args.tol, args.split, args.out,
                           dict(args.param), args.vtk_times, args.max_steps, args.max_dofs,
                           args.max_wall, args.seed)
        status = run(config)
        print(f"{'completed' if status == EXIT_OK else 'budget-exhausted'}: {args.out / 'summary.json'}")
        return status
    except SystemExit as err:
        return EXIT_INPUT if err.code else EXIT_OK
    except (InputError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except StafemError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_AUDIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
