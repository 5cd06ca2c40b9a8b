from __future__ import annotations

import io

import numpy as np
import pytest

from patchepi.config import build_experiment, load_yaml
from patchepi.errors import InputError
from patchepi.verify import grid_allowance, variance_ci, verify_fclt, verify_flln

BASE = """
model:
  L: 2
  lambda: [1.5, 1.2]
  kappa: [[1, 0.2], [0.3, 1]]
  gamma: 0.5
  nu_S: [[0, 0.3], [0.2, 0]]
laws:
  G: {family: gamma, shape: 2, scale: 0.5}
  F: {family: uniform, low: 0.5, high: 2.0}
init:
  fractions: [[0.45, 0.46], [0.02, 0.0], [0.03, 0.02], [0.01, 0.01]]
run:
  T: 2.0
  dt: 0.1
  N: [400]
  M: 30
  P: 500
  checkpoints: [1.0, 2.0]
"""


def load(text=BASE, **run):
    exp = build_experiment(load_yaml(io.StringIO(text)))
    for k, v in run.items():
        setattr(exp, k, v)
    return exp


def test_too_few_replicates_rejected():
    with pytest.raises(InputError) as exc:
        verify_flln(load(M=5))
    assert exc.value.code == "INSUFFICIENT_REPLICATES"
    with pytest.raises(InputError):
        verify_fclt(load(M=5))


def test_variance_interval_covers_estimate():
    lo, hi = variance_ci(2.0, 100, 0.95)
    assert lo < 2.0 < hi
    lo2, hi2 = variance_ci(2.0, 10_000, 0.95)
    assert lo < lo2 and hi2 < hi


def test_grid_allowance_shrinks_with_step():
    coarse = load()
    fine = load(dt=0.05)
    _, eps_c = grid_allowance(coarse)
    _, eps_f = grid_allowance(fine)
    assert eps_f.max() < 0.5 * eps_c.max()


def test_flln_report_structure_and_repeatability():
    exp = load()
    a, b = verify_flln(exp), verify_flln(exp)
    assert a.to_text() == b.to_text()
    assert a.passed
    assert len(a.cells) == 2 * 4 * 2
    assert all(c["decisive"] for c in a.cells)
    assert a.summary["slope"] is None


def test_flln_uses_largest_population_for_verdict():
    exp = load(N=(50, 400))
    rep = verify_flln(exp)
    decisive = {c["N"] for c in rep.cells if c["decisive"]}
    assert decisive == {400}
    assert rep.summary["slope"] is not None and rep.summary["slope_ok"]


def test_fclt_without_infection_is_degenerate_pass():
    text = BASE.replace("lambda: [1.5, 1.2]", "lambda: [0.0, 0.0]").replace(
        "[[0.45, 0.46], [0.02, 0.0], [0.03, 0.02], [0.01, 0.01]]",
        "[[0.5, 0.49], [0.0, 0.0], [0.0, 0.0], [0.01, 0.0]]")
    rep = verify_fclt(load(text))
    assert rep.passed
    assert all(c["degenerate"] for c in rep.cells)
    assert rep.summary["tested_cells"] == 0


def test_fclt_report_repeatable_and_passes_small_case():
    exp = load()
    a, b = verify_fclt(exp), verify_fclt(exp)
    assert a.to_text() == b.to_text()
    assert a.passed
    assert 0.0 <= a.tolerances["family_coverage_lower_bound"] <= 1.0
    assert np.all([c["var_fclt"] > 0 for c in a.cells])
