import csv
import json
import math

import numpy as np
import pytest

from stafem.adaptivity import tafem
from stafem.cli import (EXIT_AUDIT_FAILED, EXIT_BUDGET, EXIT_INPUT, EXIT_OK, LOG_HEADER, RunConfig,
                        audit_run, main, write_outputs)
from stafem.errors import InputError
from stafem.mesh import square_mesh
from stafem.problems import ProblemSpec


@pytest.fixture(scope="module")
def decay_dir(tmp_path_factory):
    u0 = lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)
    prob = ProblemSpec("decay", 0.2, lambda: square_mesh(2), u0, lambda x, y, t: 0 * x, data_levels=2)
    out = tmp_path_factory.mktemp("decay")
    write_outputs(tafem(prob, 0.8), out)
    return out


def _rewrite_steps(src, dst, edit):
    dst.mkdir()
    for name in ("summary.json", "log.csv"):
        (dst / name).write_text((src / name).read_text())
    with open(src / "steps.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    edit(rows)
    with open(dst / "steps.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def test_outputs_and_audit_pass(decay_dir, capsys):
    with open(decay_dir / "log.csv") as fh:
        assert fh.readline().strip().split(",") == LOG_HEADER
    s = json.loads((decay_dir / "summary.json").read_text())
    assert s["status"] == "completed" and s["param_sigma"] == 0.5
    ok, report = audit_run(decay_dir)
    assert ok, report
    assert main(["audit", str(decay_dir)]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out


def test_audit_detects_injected_fault(decay_dir, tmp_path):
    s = json.loads((decay_dir / "summary.json").read_text())

    def corrupt(rows):
        rows[0]["E_t"] = repr(2 * s["tol_Gt"] ** 2)

    _rewrite_steps(decay_dir, tmp_path / "bad", corrupt)
    ok, report = audit_run(tmp_path / "bad")
    assert not ok
    assert any(line.startswith("FAIL step 1: E_t") for line in report)
    assert main(["audit", str(tmp_path / "bad")]) == EXIT_AUDIT_FAILED


def test_audit_detects_energy_violation(decay_dir, tmp_path):
    def corrupt(rows):
        rows[-1]["end2"] = repr(float(rows[-1]["end2"]) + 10.0)

    _rewrite_steps(decay_dir, tmp_path / "bad", corrupt)
    ok, report = audit_run(tmp_path / "bad")
    assert not ok and any("energy" in line for line in report)


def test_audit_missing_files(tmp_path):
    with pytest.raises(InputError):
        audit_run(tmp_path)
    assert main(["audit", str(tmp_path)]) == EXIT_INPUT


def test_run_budget_exhausted_and_partial_audit(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", "--experiment", "singular", "--algorithm", "astfem", "--tol", "1.0",
                 "--max-steps", "3", "--out", str(out), "--vtk-times", "0,1e-9"])
    assert code == EXIT_BUDGET
    s = json.loads((out / "summary.json").read_text())
    assert s["status"] == "budget-exhausted" and s["steps"] == 3
    assert (out / "snapshot_000.vtk").is_file()
    ok, report = audit_run(out)
    assert ok, report
    assert any("global budgets skipped" in line for line in report)
    assert "budget-exhausted" in capsys.readouterr().out


def test_bad_arguments(tmp_path):
    assert main(["--experiment", "nope"]) == EXIT_INPUT
    assert main(["--experiment", "smooth", "--tol", "-1", "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["--experiment", "smooth", "--param", "sigma=2", "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["--experiment", "smooth", "--param", "bogus=1", "--out", str(tmp_path)]) == EXIT_INPUT


def test_run_config_validation():
    with pytest.raises(InputError):
        RunConfig("smooth", algorithm="x").validate()
    with pytest.raises(InputError):
        RunConfig("smooth", tol=math.nan).validate()
    cfg = RunConfig("smooth", params={"kappa": 0.25}, max_wall=10.0)
    p = cfg.algorithm_params()
    assert p.kappa == 0.25 and p.max_wall == 10.0
