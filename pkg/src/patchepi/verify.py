"""Verification campaigns: ensemble means against the fluid limit and
scaled fluctuations against the Gaussian limit.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import yaml
from scipy import stats

from .config import ExperimentSpec
from .errors import InputError
from .fclt import (DriverCovariancePanel, check_admissible, initial_fluctuations, linearization,
                   sample_drivers, solve_fluctuations)
from .fluid import solve_fluid
from .migration import build_kernel_table
from .model import COMPARTMENTS
from .simulator import run_replicates

MIN_REPLICATES = 10


@dataclass
class VerificationReport:
    """Outcome of one campaign; ``cells`` holds one dict per tested quantity."""

    kind: str
    passed: bool
    decision_rule: str
    config_hash: str
    seeds: dict
    grid: dict
    tolerances: dict
    cells: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_text(self) -> str:
        """Structured text; identical inputs give identical bytes."""
        return yaml.safe_dump(_plain(asdict(self)), sort_keys=False, width=120)

    def cell_rows(self):
        keys = sorted({k for c in self.cells for k in c})
        yield tuple(keys)
        for c in self.cells:
            yield tuple(c.get(k, "") for k in keys)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(repr(float(obj))) if math.isfinite(obj) else str(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _grid_indices(times, checkpoints, dt):
    return [int(round(c / dt)) for c in checkpoints]


def _fluid(exp: ExperimentSpec, dt: float, T: float):
    table = build_kernel_table(exp.model, exp.laws, dt, T, mc_samples=exp.options["mc_samples"],
                               mc_seed=exp.base_seed)
    return table, solve_fluid(exp.model, table, exp.init)


def grid_allowance(exp: ExperimentSpec) -> tuple[np.ndarray, np.ndarray]:
    """Fluid at the checkpoints and its Richardson error estimate, both (n_cp, 4, L).

    With a second-order scheme the error of the ``dt`` solve is about
    ``4/3 |X_dt - X_{dt/2}|``.
    """
    T = max(exp.checkpoints)
    _, coarse = _fluid(exp, exp.dt, T)
    _, fine = _fluid(exp, exp.dt / 2, T)
    kc = _grid_indices(coarse.times, exp.checkpoints, exp.dt)
    kf = [2 * k for k in kc]
    xc, xf = coarse.comps[kc], fine.comps[kf]
    return xc, 4.0 / 3.0 * np.abs(xc - xf)


def verify_flln(exp: ExperimentSpec, workers: int = 1) -> VerificationReport:
    """Compare ensemble mean fractions with the fluid at every checkpoint.

    A cell passes when ``|mean - fluid| <= max(z * SE, eps_grid)``. The
    verdict uses the largest N; across the N list the log-log slope of the
    largest absolute error must fall in the slope window.
    """
    if exp.M < MIN_REPLICATES:
        raise InputError("INSUFFICIENT_REPLICATES", f"M={exp.M} < {MIN_REPLICATES}")
    opts = exp.options
    z_thr = opts["z_threshold"]
    window = tuple(float(v) for v in opts["slope_window"])
    fluid_cp, eps = grid_allowance(exp)
    grid = np.asarray(exp.checkpoints)
    T = float(grid.max())
    cells, max_err, max_z = [], [], []
    passed_cells = True
    for n_idx, N in enumerate(exp.N):
        counts = exp.init.to_counts(N)
        st = run_replicates(exp.model, exp.laws, counts, T, exp.base_seed + n_idx, exp.M, grid, workers=workers)
        diff = st.mean - fluid_cp
        se = st.se
        allow = np.maximum(z_thr * se, eps)
        ok = np.abs(diff) <= allow + 1e-15
        z = np.divide(diff, se, out=np.zeros_like(diff), where=se > 0)
        max_err.append(float(np.max(np.abs(diff))))
        max_z.append(float(np.max(np.abs(z))))
        final = N == max(exp.N)
        if final:
            passed_cells = bool(ok.all())
        for k, t in enumerate(grid):
            for c in range(4):
                for i in range(exp.model.L):
                    cells.append({
                        "N": N, "t": float(t), "compartment": COMPARTMENTS[c], "patch": i + 1,
                        "fluid": float(fluid_cp[k, c, i]), "mean": float(st.mean[k, c, i]),
                        "se": float(se[k, c, i]), "z": float(z[k, c, i]), "eps_grid": float(eps[k, c, i]),
                        "pass": bool(ok[k, c, i]), "decisive": final,
                    })
    slope = None
    slope_ok = True
    if len(set(exp.N)) >= 2:
        x = np.log(np.asarray(exp.N, dtype=float))
        y = np.log(np.maximum(max_err, 1e-300))
        slope = float(np.polyfit(x, y, 1)[0])
        if len(set(exp.N)) >= 3:
            slope_ok = window[0] <= slope <= window[1]
    seeds = {"base_seed": exp.base_seed,
             "replicate_seeds": {str(N): exp.base_seed + j for j, N in enumerate(exp.N)},
             "mc_seed": exp.base_seed}
    return VerificationReport(
        kind="verify-flln",
        passed=passed_cells and slope_ok,
        decision_rule=(f"|mean - fluid| <= max({z_thr} * SE, eps_grid) at every cell for N={max(exp.N)}; "
                       f"log-log slope of max error in {list(window)} when at least 3 N values"),
        config_hash=exp.config_hash,
        seeds=seeds,
        grid={"dt": exp.dt, "checkpoints": list(exp.checkpoints), "N": list(exp.N), "M": exp.M},
        tolerances={"z_threshold": z_thr, "slope_window": list(window), "eps_grid_method": "richardson dt vs dt/2"},
        cells=cells,
        summary={"max_abs_error": dict(zip(map(str, exp.N), max_err)),
                 "max_abs_z": dict(zip(map(str, exp.N), max_z)),
                 "slope": slope, "slope_ok": slope_ok, "cells_ok": passed_cells,
                 "max_eps_grid": float(eps.max())},
    )


def variance_ci(s2, n, level):
    """Chi-square confidence interval for a normal variance from ``n`` samples."""
    a = 1.0 - level
    df = n - 1
    lo = df * s2 / stats.chi2.ppf(1 - a / 2, df)
    hi = df * s2 / stats.chi2.ppf(a / 2, df)
    return lo, hi


def fclt_ensemble(exp: ExperimentSpec, T: float | None = None, dt: float | None = None):
    """Build the fluid, driver panel and fluctuation ensemble for ``exp``."""
    dt = dt or exp.options.get("fclt_dt") or exp.dt
    T = T or exp.T
    table = build_kernel_table(exp.model, exp.laws, dt, T, mc_samples=exp.options["mc_samples"],
                               mc_seed=exp.base_seed, cross=exp.options["coupling"] == "independent")
    fluid = solve_fluid(exp.model, table, exp.init)
    field_ = linearization(fluid, exp.model)
    panel = DriverCovariancePanel(exp.model, table, fluid, exp.options["coupling"], mc_seed=exp.base_seed)
    paths = sample_drivers(panel, exp.P, exp.base_seed)
    init = initial_fluctuations(exp.model, exp.P, exp.options["initial_variances"], exp.base_seed)
    ens = solve_fluctuations(paths, field_, table, fluid, exp.model, init,
                             pooled_initial_indices=exp.options["pooled_initial_indices"])
    return table, fluid, panel, paths, ens


def verify_fclt(exp: ExperimentSpec, workers: int = 1) -> VerificationReport:
    """Compare variances of ``sqrt(N) (X^N - X)`` with the sampled Gaussian limit.

    Every (checkpoint, compartment, patch) cell passes when the chi-square
    confidence intervals of the two variances overlap. Cells where both
    variances vanish are flagged degenerate and pass.
    """
    check_admissible(exp.model)
    if exp.M < MIN_REPLICATES:
        raise InputError("INSUFFICIENT_REPLICATES", f"M={exp.M} < {MIN_REPLICATES}")
    opts = exp.options
    level = opts["ci_level"]
    dt = opts.get("fclt_dt") or exp.dt
    T = float(max(exp.checkpoints))
    _, fluid, _, _, ens = fclt_ensemble(exp, T=T, dt=dt)
    N = max(exp.N)
    grid = np.asarray(exp.checkpoints)
    st = run_replicates(exp.model, exp.laws, exp.init.to_counts(N), T, exp.base_seed, exp.M, grid,
                        keep_panels=True, workers=workers)
    kc = _grid_indices(fluid.times, exp.checkpoints, dt)
    sim = np.stack([p.counts / N for p in st.panels])  # (M, n_cp, 4, L)
    fl = fluid.comps[kc]
    scaled = math.sqrt(N) * (sim - fl[None])
    comps = [COMPARTMENTS.index(c) for c in opts["fclt_compartments"]]
    cells = []
    n_tested = 0
    all_ok = True
    for j, t in enumerate(grid):
        for c in comps:
            for i in range(exp.model.L):
                vs = float(scaled[:, j, c, i].var(ddof=1))
                vf = float(ens.comps[:, kc[j], c, i].var(ddof=1))
                degenerate = vs == 0.0 and vf < 1e-14
                if degenerate:
                    lo_s = hi_s = lo_f = hi_f = 0.0
                    ok = True
                else:
                    lo_s, hi_s = variance_ci(vs, exp.M, level)
                    lo_f, hi_f = variance_ci(vf, exp.P, level)
                    ok = bool(lo_s <= hi_f and lo_f <= hi_s)
                    n_tested += 1
                all_ok &= ok
                cells.append({
                    "t": float(t), "compartment": COMPARTMENTS[c], "patch": i + 1,
                    "var_sim": vs, "ci_sim": [float(lo_s), float(hi_s)],
                    "var_fclt": vf, "ci_fclt": [float(lo_f), float(hi_f)],
                    "overlap": ok, "degenerate": degenerate,
                })
    return VerificationReport(
        kind="verify-fclt",
        passed=bool(all_ok),
        decision_rule=f"{level:.0%} chi-square variance intervals overlap in every tested cell",
        config_hash=exp.config_hash,
        seeds={"base_seed": exp.base_seed, "replicate_seeds": exp.base_seed, "driver_seed": exp.base_seed},
        grid={"dt": dt, "checkpoints": list(exp.checkpoints), "N": N, "M": exp.M, "P": exp.P},
        tolerances={"ci_level": level, "coupling": opts["coupling"],
                    "family_coverage_lower_bound": max(0.0, 1.0 - (1.0 - level) * max(n_tested, 1))},
        cells=cells,
        summary={"tested_cells": n_tested, "degenerate_cells": sum(c["degenerate"] for c in cells)},
    )
