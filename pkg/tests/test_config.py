from __future__ import annotations

import io

import numpy as np
import pytest

from patchepi.config import build_experiment, load_yaml, parse_config
from patchepi.errors import InputError, ValidationError

SIR = """
model:
  L: 1
  lambda: [2.0]
  variant: SIR
laws:
  F: {family: exponential, rate: 1.0}
init:
  fractions: [[0.99], [0.0], [0.01], [0.0]]
"""

SEIR_TWO = """
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
  counts: [[90, 80], [5, 0], [5, 10], [0, 0]]
run:
  mode: simulate
  T: 5.0
  dt: 0.05
"""


def load(text):
    return build_experiment(load_yaml(io.StringIO(text)))


def test_minimal_sir_fills_and_records_defaults():
    exp = load(SIR)
    assert exp.model.variant == "SIR"
    assert exp.laws.G.family == "deterministic" and exp.laws.G.params["value"] == 0.0
    assert exp.laws.F0.family == "exponential"
    for key in ("model.kappa", "model.gamma", "laws.G", "laws.F0", "run.dt", "run.checkpoints"):
        assert key in exp.defaults
    assert exp.checkpoints == pytest.approx((2.0, 4.0, 6.0, 8.0, 10.0))
    assert np.array_equal(exp.model.kappa, np.eye(1))


def test_counts_set_population_size():
    exp = load(SEIR_TWO)
    assert exp.N == (190,)
    assert exp.init.fractions.sum() == pytest.approx(1.0)
    assert exp.laws.G0.family == "equilibrium"


def test_config_hash_is_stable_and_tracks_seed(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(SEIR_TWO)
    a, b = parse_config(path), parse_config(path)
    assert a.config_hash == b.config_hash
    c = a.with_seed(5)
    assert c.base_seed == 5 and c.config_hash != a.config_hash
    assert a.base_seed == 0


def test_parse_error_reports_position():
    with pytest.raises(InputError) as exc:
        load("model:\n  L: [1\n  lambda: 2\n")
    assert exc.value.code == "PARSE_ERROR"
    assert exc.value.details["line"] is not None and exc.value.details["column"] is not None


@pytest.mark.parametrize("text,path", [
    (SIR.replace("variant: SIR", "variant: SIR\n  beta: 0.3"), "model.beta"),
    (SIR + "run:\n  speed: 3\n", "run.speed"),
    (SIR.replace("fractions", "shares"), "init.shares"),
])
def test_unknown_keys_rejected(text, path):
    with pytest.raises(InputError) as exc:
        load(text)
    assert exc.value.code == "SCHEMA_VIOLATION"
    assert exc.value.details["path"] == path


def test_missing_section_and_bad_values():
    with pytest.raises(InputError) as exc:
        load("model: {L: 1, lambda: [1.0]}\nlaws: {F: {family: exponential, rate: 1}}\n")
    assert exc.value.code == "SCHEMA_VIOLATION"
    with pytest.raises(InputError):
        load(SIR + "run:\n  T: 1.005\n  dt: 0.01\n")
    with pytest.raises(InputError):
        load(SIR + "run:\n  checkpoints: [0.5, 0.555]\n  dt: 0.01\n")
    with pytest.raises(InputError):
        load(SIR.replace("exponential, rate: 1.0", "weibull, k: 1"))


def test_model_validation_errors_surface():
    with pytest.raises(ValidationError) as exc:
        load(SIR.replace("lambda: [2.0]", "lambda: [-2.0]"))
    assert "NEGATIVE_RATE" in exc.value.codes


def test_verify_modes_need_replicates():
    with pytest.raises(InputError) as exc:
        load(SIR + "run:\n  mode: verify-flln\n  N: [100]\n")
    assert exc.value.code == "SCHEMA_VIOLATION"
    with pytest.raises(InputError):
        load(SIR + "run:\n  mode: verify-fclt\n  N: [100]\n  M: 20\n")
    exp = load(SIR + "run:\n  mode: verify-fclt\n  N: [100]\n  M: 20\n  P: 50\n")
    assert exp.P == 50


def test_fclt_inadmissible_at_parse_time():
    text = SEIR_TWO.replace("gamma: 0.5", "gamma: 1.0").replace("mode: simulate", "mode: fclt")
    with pytest.raises(InputError) as exc:
        load(text)
    assert exc.value.code == "FCLT_INADMISSIBLE"
    # the same model is fine for the fluid limit
    load(text.replace("mode: fclt", "mode: fluid"))
