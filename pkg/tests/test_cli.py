from __future__ import annotations

import subprocess
import sys

import numpy as np
import pytest

from patchepi.cli import main

BASE = """
model:
  L: 2
  lambda: [1.5, 1.2]
  kappa: [[1, 0.2], [0.3, 1]]
  gamma: 0.5
  nu_S: [[0, 0.3], [0.2, 0]]
  nu_E: [[0, 0.3], [0.2, 0]]
  nu_I: [[0, 0.3], [0.2, 0]]
  nu_R: [[0, 0.3], [0.2, 0]]
laws:
  G: {family: gamma, shape: 2, scale: 0.5}
  F: {family: uniform, low: 0.5, high: 2.0}
init:
  fractions: [[0.45, 0.46], [0.02, 0.0], [0.03, 0.02], [0.01, 0.01]]
run:
  T: 2.0
  dt: 0.1
  N: [300]
  M: 12
  P: 200
  checkpoints: [1.0, 2.0]
"""


@pytest.fixture
def config(tmp_path):
    def make(extra="", text=BASE):
        path = tmp_path / f"cfg{len(list(tmp_path.iterdir()))}.yaml"
        path.write_text(text + extra)
        return str(path)
    return make


def run(cmd, cfg, out, *extra):
    return main([cmd, "--config", cfg, "--out", str(out), *extra])


def test_fluid_and_kernels_outputs(config, tmp_path):
    cfg = config()
    assert run("fluid", cfg, tmp_path / "f") == 0
    lines = (tmp_path / "f" / "fluid.csv").read_text().splitlines()
    assert lines[0] == "time,patch,Sbar,Ebar,Ibar,Rbar,Upsbar,Abar"
    assert len(lines) == 1 + 21 * 2
    assert run("kernels", cfg, tmp_path / "k") == 0
    assert (tmp_path / "k" / "kernels.csv").read_text().startswith("t,l,i,p,q,PG0,PG,QF0,Phi0,Phi")


def test_simulate_outputs(config, tmp_path):
    assert run("simulate", config(), tmp_path / "s", "--replicates", "3", "--grid-dt", "0.5") == 0
    out = tmp_path / "s"
    ev = np.load(out / "events_r0.npy")
    assert ev.size > 0
    ens = (out / "ensemble.csv").read_text().splitlines()
    assert len(ens) == 1 + 5 * 2
    assert ens[0].startswith("time,patch,mean_S")


def test_fclt_outputs(config, tmp_path):
    assert run("fclt", config(), tmp_path / "c") == 0
    out = tmp_path / "c"
    cov = (out / "driver_covariance.csv").read_text().splitlines()
    assert cov[0] == "family,l,i,l2,i2,t,t2,cov"
    assert any(line.startswith("E/I,") for line in cov)
    assert (out / "fclt_paths.csv").exists() and (out / "fclt_checkpoint_covariance.csv").exists()


def test_simulate_identical_across_thread_counts(config, tmp_path):
    cfg = config()
    for n in (1, 3):
        assert run("simulate", cfg, tmp_path / f"t{n}", "--replicates", "6", "--threads", str(n)) == 0
    for name in ("ensemble.csv", "trajectory_r0.csv"):
        assert (tmp_path / "t1" / name).read_bytes() == (tmp_path / "t3" / name).read_bytes()


def test_seed_override_changes_output(config, tmp_path):
    cfg = config()
    run("simulate", cfg, tmp_path / "a", "--replicates", "2", "--seed", "1")
    run("simulate", cfg, tmp_path / "b", "--replicates", "2", "--seed", "2")
    assert (tmp_path / "a" / "ensemble.csv").read_bytes() != (tmp_path / "b" / "ensemble.csv").read_bytes()


def test_verification_pass_and_fail_codes(config, tmp_path, capsys):
    cfg = config()
    assert run("verify-flln", cfg, tmp_path / "v") == 0
    assert "verify-flln: PASS" in capsys.readouterr().out
    report = (tmp_path / "v" / "report_flln.txt").read_text()
    assert "decision_rule" in report and "config_hash" in report
    # with no statistical allowance the ensemble mean cannot sit on the fluid
    strict = config("  z_threshold: 0.0\n")
    assert run("verify-flln", strict, tmp_path / "w") == 1
    assert "FAIL" in capsys.readouterr().out


def test_input_errors_exit_two(config, tmp_path, capsys):
    assert run("fluid", config(text=BASE.replace("gamma: 0.5", "gamma: 0.5\n  beta: 1")), tmp_path / "x") == 2
    assert "SCHEMA_VIOLATION" in capsys.readouterr().err
    assert run("fluid", config(), tmp_path / "x", "--seed", "-1") == 2
    assert "BAD_SEED" in capsys.readouterr().err
    assert run("fluid", str(tmp_path / "missing.yaml"), tmp_path / "x") == 2


def test_numerical_error_exits_three(config, tmp_path, capsys):
    # patch 2 is empty and closed, so the linearization has nothing to divide by
    text = BASE.replace("[[0.45, 0.46], [0.02, 0.0], [0.03, 0.02], [0.01, 0.01]]",
                        "[[0.9, 0.0], [0.04, 0.0], [0.06, 0.0], [0.0, 0.0]]")
    for name in ("nu_S", "nu_E", "nu_I", "nu_R"):
        text = text.replace(f"  {name}: [[0, 0.3], [0.2, 0]]\n", "")
    assert run("fclt", config(text=text), tmp_path / "n") == 3
    assert "EMPTY_PATCH" in capsys.readouterr().err


def test_module_entry_point(config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "patchepi.cli", "fluid", "--config", config(),
                           "--out", str(tmp_path / "m")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "m" / "fluid.csv").exists()
