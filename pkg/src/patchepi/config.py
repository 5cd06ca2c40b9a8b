"""Experiment configuration files.

A config is a YAML mapping with four sections::

    model: {L, lambda, lambda_breaks, kappa, gamma, nu_S, nu_E, nu_I, nu_R, variant}
    laws:  {G, F, G0, F0, joint_mode, joint_params: {rho}}
    init:  {fractions: 4xL} or {counts: 4xL}
    run:   {mode, N, M, P, dt, T, checkpoints, base_seed, out_dir, ...}

A law is written as ``{family: gamma, shape: 2, scale: 0.5}``. ``G0`` and
``F0`` default to the stationary-excess laws of ``G`` and ``F``. Unknown
keys are rejected. Every default that gets filled in is listed in
``ExperimentSpec.defaults``.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import InputError
from .fclt import COUPLINGS, check_admissible
from .laws import JOINT_MODES, DurationLaw, equilibrium_law
from .model import (InitialCondition, Laws, ModelSpec, check_initial, check_laws,
                    validate_spec)

MODES = ("simulate", "fluid", "fclt", "verify-flln", "verify-fclt", "kernels")

MODEL_KEYS = {"L", "lambda", "lambda_breaks", "kappa", "gamma", "nu_S", "nu_E", "nu_I", "nu_R", "variant"}
LAW_KEYS = {"G", "F", "G0", "F0", "joint_mode", "joint_params"}
INIT_KEYS = {"fractions", "counts"}

# run-section defaults; verdict thresholds are overridable here
RUN_DEFAULTS = {
    "mode": "fluid",
    "N": [1000],
    "M": 100,
    "P": 1000,
    "dt": 0.01,
    "T": 10.0,
    "checkpoints": None,
    "base_seed": 0,
    "out_dir": "out",
    "grid_dt": None,
    "fclt_dt": None,
    "coupling": "cohort",
    "pooled_initial_indices": True,
    "initial_variances": None,
    "mc_samples": 1_000_000,
    "z_threshold": 3.0,
    "ci_level": 0.95,
    "slope_window": [-0.65, -0.35],
    "fclt_compartments": ["I"],
    "paths_out": 20,
}


@dataclass
class ExperimentSpec:
    """A validated experiment: model, laws, initial condition and run settings."""

    model: ModelSpec
    laws: Laws
    init: InitialCondition
    mode: str
    N: tuple
    M: int
    P: int
    dt: float
    T: float
    checkpoints: tuple
    base_seed: int
    out_dir: str
    options: dict = field(default_factory=dict)
    defaults: list = field(default_factory=list)
    resolved: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.resolved, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentSpec":
        out = copy.copy(self)
        out.base_seed = int(seed)
        out.resolved = copy.deepcopy(self.resolved)
        out.resolved["run"]["base_seed"] = int(seed)
        return out


def _violation(path: str, msg: str) -> InputError:
    return InputError("SCHEMA_VIOLATION", f"{path}: {msg}", path=path)


def _check_keys(section: dict, allowed: set, path: str):
    if not isinstance(section, dict):
        raise _violation(path, "expected a mapping")
    for key in section:
        if key not in allowed:
            raise _violation(f"{path}.{key}", f"unknown key {key!r}")


def _law(raw, path: str) -> DurationLaw:
    if not isinstance(raw, dict) or "family" not in raw:
        raise _violation(path, "a law needs a 'family' key")
    params = {k: v for k, v in raw.items() if k != "family"}
    try:
        return DurationLaw(raw["family"], params)
    except InputError as exc:
        raise _violation(path, str(exc)) from None


def _matrix(raw, path: str):
    try:
        return np.asarray(raw, dtype=float)
    except (TypeError, ValueError):
        raise _violation(path, "expected a numeric array") from None


def _grid_index(t: float, dt: float) -> int | None:
    k = t / dt
    kr = int(round(k))
    return kr if abs(k - kr) <= 1e-9 * max(1.0, abs(k)) else None


def load_yaml(path) -> dict:
    text = Path(path).read_text() if not hasattr(path, "read") else path.read()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line, col = (mark.line + 1, mark.column + 1) if mark is not None else (None, None)
        raise InputError("PARSE_ERROR", f"line {line}, column {col}: {getattr(exc, 'problem', exc)}",
                         line=line, column=col) from None
    if not isinstance(data, dict):
        raise InputError("PARSE_ERROR", "top level must be a mapping", line=1, column=1)
    return data


def parse_config(path) -> ExperimentSpec:
    """Read, check and validate a config file."""
    return build_experiment(load_yaml(path))


def build_experiment(data: dict) -> ExperimentSpec:
    """Validate an already-loaded config mapping."""
    _check_keys(data, {"model", "laws", "init", "run"}, "config")
    for sec in ("model", "laws", "init"):
        if sec not in data:
            raise _violation(sec, "missing section")
    defaults = []

    # model
    m = data["model"]
    _check_keys(m, MODEL_KEYS, "model")
    for key in ("L", "lambda"):
        if key not in m:
            raise _violation(f"model.{key}", "required")
    L = m["L"]
    if not isinstance(L, int) or isinstance(L, bool):
        raise _violation("model.L", "must be an integer")
    for key in ("kappa", "gamma", "variant", "lambda_breaks"):
        if key not in m:
            defaults.append(f"model.{key}")
    spec = ModelSpec(
        L=L,
        lam=_matrix(m["lambda"], "model.lambda"),
        kappa=None if "kappa" not in m else _matrix(m["kappa"], "model.kappa"),
        gamma=m.get("gamma", 0.0),
        nu_S=None if "nu_S" not in m else _matrix(m["nu_S"], "model.nu_S"),
        nu_E=None if "nu_E" not in m else _matrix(m["nu_E"], "model.nu_E"),
        nu_I=None if "nu_I" not in m else _matrix(m["nu_I"], "model.nu_I"),
        nu_R=None if "nu_R" not in m else _matrix(m["nu_R"], "model.nu_R"),
        variant=m.get("variant", "SEIR"),
        lam_breaks=tuple(m.get("lambda_breaks", ())),
    )
    for name in ("nu_S", "nu_E", "nu_I", "nu_R"):
        if name not in m:
            defaults.append(f"model.{name}")
    spec = validate_spec(spec)

    # laws
    lw = data["laws"]
    _check_keys(lw, LAW_KEYS, "laws")
    if "F" not in lw:
        raise _violation("laws.F", "required")
    F = _law(lw["F"], "laws.F")
    zero = DurationLaw.deterministic(0.0)
    if "G" in lw:
        G = _law(lw["G"], "laws.G")
    elif spec.layout.has_phase1:
        raise _violation("laws.G", f"required for variant {spec.variant}")
    else:
        G = zero
        defaults.append("laws.G")
    if "G0" in lw:
        G0 = _law(lw["G0"], "laws.G0")
    else:
        G0 = zero if not spec.layout.has_phase1 else equilibrium_law(G)
        defaults.append("laws.G0")
    if "F0" in lw:
        F0 = _law(lw["F0"], "laws.F0")
    else:
        F0 = equilibrium_law(F)
        defaults.append("laws.F0")
    mode = lw.get("joint_mode", "product")
    if mode not in JOINT_MODES:
        raise _violation("laws.joint_mode", f"must be one of {JOINT_MODES}")
    jp = lw.get("joint_params", {}) or {}
    _check_keys(jp, {"rho"}, "laws.joint_params")
    if "joint_mode" not in lw:
        defaults.append("laws.joint_mode")
    laws = Laws(G, F, G0, F0, mode, float(jp.get("rho", 0.0)))
    check_laws(spec, laws)
    laws.H  # construct the joint laws now so bad copula parameters fail here
    laws.H0

    # initial condition
    ini = data["init"]
    _check_keys(ini, INIT_KEYS, "init")
    if len(ini) != 1:
        raise _violation("init", "give exactly one of 'fractions' or 'counts'")
    counts_total = None
    if "counts" in ini:
        counts = _matrix(ini["counts"], "init.counts")
        if counts.shape != (4, spec.L) or np.any(counts < 0) or np.any(counts != np.round(counts)):
            raise _violation("init.counts", f"expected nonnegative integers of shape (4, {spec.L})")
        init = InitialCondition.from_counts(counts)
        counts_total = int(counts.sum())
    else:
        fr = _matrix(ini["fractions"], "init.fractions")
        if fr.shape != (4, spec.L):
            raise _violation("init.fractions", f"expected shape (4, {spec.L})")
        init = InitialCondition(fr)
    check_initial(spec, init.fractions)

    # run
    run_raw = data.get("run", {}) or {}
    _check_keys(run_raw, set(RUN_DEFAULTS), "run")
    run = dict(RUN_DEFAULTS)
    run.update(run_raw)
    for key in RUN_DEFAULTS:
        if key not in run_raw:
            defaults.append(f"run.{key}")
    if "N" not in run_raw and counts_total is not None:
        run["N"] = [counts_total]
    mode_name = run["mode"]
    if mode_name not in MODES:
        raise _violation("run.mode", f"must be one of {MODES}")
    N = run["N"] if isinstance(run["N"], list) else [run["N"]]
    if not N or any(not isinstance(n, int) or isinstance(n, bool) or n < 1 for n in N):
        raise _violation("run.N", "must be a list of integers >= 1")
    for key in ("M", "P", "base_seed", "paths_out", "mc_samples"):
        v = run[key]
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise _violation(f"run.{key}", "must be a nonnegative integer")
    dt, T = float(run["dt"]), float(run["T"])
    if not dt > 0 or not T > 0:
        raise _violation("run.dt", "dt and T must be positive")
    if _grid_index(T, dt) is None:
        raise _violation("run.T", f"T={T} is not a multiple of dt={dt}")
    cps = run["checkpoints"]
    if cps is None:
        cps = [T * (j + 1) / 5 for j in range(5)]
        cps = [dt * round(c / dt) for c in cps]
    cps = [float(c) for c in cps]
    for c in cps:
        if _grid_index(c, dt) is None or c < 0 or c > T + 1e-9 * T:
            raise _violation("run.checkpoints", f"checkpoint {c} is not a grid point of [0, {T}] with dt={dt}")
    if run["coupling"] not in COUPLINGS:
        raise _violation("run.coupling", f"must be one of {COUPLINGS}")
    for key in ("z_threshold", "ci_level"):
        run[key] = float(run[key])
    if not 0 < run["ci_level"] < 1:
        raise _violation("run.ci_level", "must lie in (0, 1)")
    for c in run["fclt_compartments"]:
        if c not in ("S", "E", "I", "R"):
            raise _violation("run.fclt_compartments", f"unknown compartment {c!r}")
    if mode_name.startswith("verify"):
        if not run_raw.get("M") or "N" not in run_raw and counts_total is None:
            raise _violation("run", "verify modes need both N and M")
        if mode_name == "verify-fclt" and not run_raw.get("P"):
            raise _violation("run.P", "verify-fclt needs the FCLT path count P")
    if mode_name in ("fclt", "verify-fclt"):
        check_admissible(spec)

    resolved = {
        "model": {
            "L": spec.L, "lambda": spec.lam.tolist(), "lambda_breaks": list(spec.lam_breaks),
            "kappa": spec.kappa.tolist(), "gamma": spec.gamma, "variant": spec.variant,
            **{n: getattr(spec, n).tolist() for n in ("nu_S", "nu_E", "nu_I", "nu_R")},
        },
        "laws": {"G": repr(G), "F": repr(F), "G0": repr(G0), "F0": repr(F0),
                 "joint_mode": mode, "rho": laws.rho},
        "init": init.fractions.tolist(),
        "run": {**{k: v for k, v in run.items()}, "N": N, "checkpoints": cps, "dt": dt, "T": T},
    }
    return ExperimentSpec(spec, laws, init, mode_name, tuple(N), int(run["M"]), int(run["P"]), dt, T,
                          tuple(cps), int(run["base_seed"]), str(run["out_dir"]), run, defaults, resolved)
