"""Command-line entry point ``epi``.

Exit codes: 0 success or verification pass, 1 verification fail, 2 input
error, 3 numerical error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import parse_config
from .errors import EpiError, InputError
from .fluid import solve_fluid
from .migration import build_kernel_table
from .model import COMPARTMENTS
from .simulator import replicate_seed, run_replicates, simulate

log = logging.getLogger("patchepi")

SUBCOMMANDS = ("simulate", "fluid", "fclt", "verify-flln", "verify-fclt", "kernels")


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return " ".join(_fmt(x) for x in v)
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _out_dir(args, exp) -> Path:
    out = Path(args.out or exp.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_kernels(exp, out: Path, args) -> int:
    table = build_kernel_table(exp.model, exp.laws, exp.dt, exp.T, mc_samples=exp.options["mc_samples"],
                               mc_seed=exp.base_seed)
    write_csv(out / "kernels.csv", ("t", "l", "i", "p", "q", "PG0", "PG", "QF0", "Phi0", "Phi"), table.to_rows())
    return 0


def cmd_fluid(exp, out: Path, args) -> int:
    table = build_kernel_table(exp.model, exp.laws, exp.dt, exp.T, mc_samples=exp.options["mc_samples"],
                               mc_seed=exp.base_seed)
    fl = solve_fluid(exp.model, table, exp.init)
    write_csv(out / "fluid.csv", ("time", "patch", "Sbar", "Ebar", "Ibar", "Rbar", "Upsbar", "Abar"), fl.rows())
    return 0


def cmd_simulate(exp, out: Path, args) -> int:
    N = max(exp.N)
    M = args.replicates if args.replicates is not None else exp.M
    step = args.grid_dt or exp.options.get("grid_dt") or exp.dt
    grid = np.arange(int(round(exp.T / step)) + 1) * step
    counts = exp.init.to_counts(N)
    # first replicate with its event log, then the ensemble
    panel, events = simulate(exp.model, exp.laws, counts, exp.T,
                             np.random.default_rng(replicate_seed(exp.base_seed, 0)), grid=grid)
    np.save(out / "events_r0.npy", events.as_array(), allow_pickle=False)
    write_csv(out / "trajectory_r0.csv", ("time", "patch", "S", "E", "I", "R", "A"), panel.rows())
    st = run_replicates(exp.model, exp.laws, counts, exp.T, exp.base_seed, M, grid, workers=args.threads)

    def rows():
        for k, t in enumerate(grid):
            for i in range(exp.model.L):
                yield ((float(t), i + 1) + tuple(st.mean[k, :, i]) + tuple(st.var[k, :, i])
                       + (st.mean_A[k, i], st.var_A[k, i]))

    header = ("time", "patch") + tuple(f"mean_{c}" for c in COMPARTMENTS) + tuple(f"var_{c}" for c in COMPARTMENTS)
    write_csv(out / "ensemble.csv", header + ("mean_A", "var_A"), rows())
    return 0


def cmd_fclt(exp, out: Path, args) -> int:
    from .fclt import FAMILIES
    from .verify import fclt_ensemble

    _, fluid, panel, _, ens = fclt_ensemble(exp)
    L = exp.model.L
    kc = [panel.index(t) for t in exp.checkpoints]

    def cov_rows():
        members = [("M_A", (i,)) for i in range(L)]
        members += [(f, (a, b)) for f in FAMILIES if f != "M_A" for a in range(L) for b in range(L)]
        for fa, ia in members:
            for fb, ib in members:
                if (fa, ia) > (fb, ib) or panel.independent(fa, ia, fb, ib):
                    continue
                C = panel.covariance_matrix(fa, ia, fb, ib)
                for j in kc:
                    for k in kc:
                        # families carry (l, i); M_A has a single patch index
                        la, lb = (ia + ia)[:2], (ib + ib)[:2]
                        yield (f"{fa}/{fb}", la[0] + 1, la[1] + 1, lb[0] + 1, lb[1] + 1,
                               panel.times[j], panel.times[k], C[j, k])

    write_csv(out / "driver_covariance.csv", ("family", "l", "i", "l2", "i2", "t", "t2", "cov"), cov_rows())

    n_out = min(exp.options["paths_out"], ens.P)

    def path_rows():
        for p in range(n_out):
            for k, t in enumerate(ens.times):
                for i in range(L):
                    yield (p, t, i + 1) + tuple(ens.comps[p, k, :, i]) + (ens.ups[p, k, i],)

    write_csv(out / "fclt_paths.csv", ("path", "time", "patch", "S", "E", "I", "R", "Ups"), path_rows())

    def cp_rows():
        for j in kc:
            C = ens.covariance_at(j)
            for a in range(4 * L):
                for b in range(a, 4 * L):
                    yield (ens.times[j], COMPARTMENTS[a // L], a % L + 1, COMPARTMENTS[b // L], b % L + 1, C[a, b])

    write_csv(out / "fclt_checkpoint_covariance.csv", ("t", "comp", "patch", "comp2", "patch2", "cov"), cp_rows())
    return 0


def _cmd_verify(kind):
    def run(exp, out: Path, args) -> int:
        from .verify import verify_fclt, verify_flln

        fn = verify_flln if kind == "flln" else verify_fclt
        report = fn(exp, workers=args.threads)
        (out / f"report_{kind}.txt").write_text(report.to_text())
        rows = list(report.cell_rows())
        write_csv(out / f"cells_{kind}.csv", rows[0], rows[1:])
        print(f"{report.kind}: {'PASS' if report.passed else 'FAIL'}")
        return 0 if report.passed else 1

    return run


COMMANDS = {
    "simulate": cmd_simulate,
    "fluid": cmd_fluid,
    "fclt": cmd_fclt,
    "verify-flln": _cmd_verify("flln"),
    "verify-fclt": _cmd_verify("fclt"),
    "kernels": cmd_kernels,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epi", description="Multi-patch epidemic simulator and limit solvers")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML experiment file")
        p.add_argument("--seed", type=int, default=None, help="override run.base_seed")
        p.add_argument("--out", "--out-dir", dest="out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker processes for replicates")
        if name == "simulate":
            p.add_argument("--replicates", type=int, default=None)
            p.add_argument("--grid-dt", type=float, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise InputError("BAD_SEED", "seed must be an unsigned 64-bit integer")
        exp = parse_config(args.config)
        if args.seed is not None:
            exp = exp.with_seed(args.seed)
        out = _out_dir(args, exp)
        return COMMANDS[args.command](exp, out, args)
    except EpiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: IO_ERROR: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
