"""Exact event-driven simulation of the N-individual patch model.

Between events every Markovian rate (infection and migration) is constant, so
the next Markovian event is an exponential race over the total rate. It is
raced against the earliest scheduled phase end held in a heap; a scheduled
event at the same instant wins. Individuals are kept in swap-remove buckets
per (slot, patch) so a uniform pick, insert and delete are O(1).
"""
from __future__ import annotations

import heapq
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EpiError, InputError, NumericalError
from .model import Laws, ModelSpec, check_initial, check_laws

INFECT, PROGRESS, RECOVER, MIGRATE = 0, 1, 2, 3
EVENT_KINDS = ("INFECT", "PROGRESS", "RECOVER", "MIGRATE")
_BLOCK = 256


@dataclass
class EventLog:
    """Columnar event record.

    Each event moves one individual from ``(comp_from, src)`` to
    ``(comp_to, dst)``; compartments use the S, E, I, R indices 0..3.
    """

    time: list = field(default_factory=list)
    kind: list = field(default_factory=list)
    comp_from: list = field(default_factory=list)
    comp_to: list = field(default_factory=list)
    src: list = field(default_factory=list)
    dst: list = field(default_factory=list)
    ident: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.time)

    def add(self, t, kind, cf, ct, src, dst, ident):
        self.time.append(t)
        self.kind.append(kind)
        self.comp_from.append(cf)
        self.comp_to.append(ct)
        self.src.append(src)
        self.dst.append(dst)
        self.ident.append(ident)

    def as_array(self) -> np.ndarray:
        dtype = [("time", "f8"), ("kind", "i1"), ("comp_from", "i1"), ("comp_to", "i1"),
                 ("src", "i4"), ("dst", "i4"), ("id", "i8")]
        out = np.empty(len(self), dtype=dtype)
        out["time"] = self.time
        out["kind"] = self.kind
        out["comp_from"] = self.comp_from
        out["comp_to"] = self.comp_to
        out["src"] = self.src
        out["dst"] = self.dst
        out["id"] = self.ident
        return out

    def infection_times(self, patch: int) -> np.ndarray:
        t = np.asarray(self.time)
        k = np.asarray(self.kind)
        s = np.asarray(self.src)
        return t[(k == INFECT) & (s == patch)] if t.size else np.zeros(0)

    def replay(self, initial_counts) -> np.ndarray:
        """Apply every event to ``initial_counts`` (shape (4, L)); returns the final counts."""
        c = np.array(initial_counts, dtype=np.int64)
        for cf, ct, s, d in zip(self.comp_from, self.comp_to, self.src, self.dst):
            c[cf, s] -= 1
            c[ct, d] += 1
            if c[cf, s] < 0:
                raise NumericalError("REPLAY_MISMATCH", "event removes an individual that is not there")
        return c


@dataclass
class TrajectoryPanel:
    """Counts ``counts[k, c, i]`` and cumulative infections ``A[k, i]`` on a time grid."""

    times: np.ndarray
    counts: np.ndarray
    A: np.ndarray
    N: int
    extinct_at: Optional[float] = None

    @property
    def fractions(self) -> np.ndarray:
        return self.counts / self.N

    def rows(self):
        """(time, patch, S, E, I, R, A) rows with one-based patches."""
        K, _, L = self.counts.shape
        for k in range(K):
            for i in range(L):
                c = self.counts[k, :, i]
                yield (float(self.times[k]), i + 1, int(c[0]), int(c[1]), int(c[2]), int(c[3]), int(self.A[k, i]))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def simulate(
    spec: ModelSpec,
    laws: Laws,
    init_counts,
    T: float,
    seed=0,
    *,
    grid=None,
    log_events: bool = True,
    stop_on_extinction: bool = False,
):
    """Simulate one sample path on ``[0, T]``.

    ``init_counts`` has shape (4, L) over (S, E, I, R). ``grid`` defaults to
    the integer times in ``[0, T]``; the panel records the state right after
    all events at or before each grid time. With ``stop_on_extinction`` the
    run ends once no individual is in either disease phase: cumulative
    infections are then final and later grid rows repeat the last state.

    Returns ``(TrajectoryPanel, EventLog or None)``.
    """
    counts0 = np.asarray(init_counts, dtype=np.int64)
    L = spec.L
    check_initial(spec, counts0)
    check_laws(spec, laws)
    if np.any(counts0 < 0):
        raise InputError("NEGATIVE_COUNT", "initial counts must be >= 0")
    N = int(counts0.sum())
    if N <= 0:
        raise InputError("EMPTY_POPULATION", "total population must be positive")
    grid = np.arange(0.0, math.floor(T) + 1.0) if grid is None else np.asarray(grid, dtype=float)
    rng = _as_rng(seed)
    layout = spec.layout
    s2c = layout.slot_to_comp
    has1 = layout.has_phase1
    end_slot = 0 if layout.recycle else 3
    inf_slot = layout.infectious_slot

    # migration: per slot, out-rate per patch and destination cumulative weights
    mig = spec.slot_rates()
    out_rate = [[float(mig[s][i].sum()) for i in range(L)] for s in range(4)]
    dest_cum = [[np.cumsum(mig[s][i]).tolist() for i in range(L)] for s in range(4)]
    kappa = spec.kappa.tolist()
    gam = spec.gamma
    scale = float(N) ** (1.0 - gam)
    breaks = list(spec.lam_breaks)
    lam_rows = spec.lam_table.tolist()

    # individuals
    slot_of: list = []
    patch_of: list = []
    pos_of: list = []
    pending: list = []  # second-phase duration drawn at infection
    buckets = [[[] for _ in range(L)] for _ in range(4)]
    cnt = [[0] * L for _ in range(4)]
    heap: list = []
    slot_counts0 = counts0[list(s2c)]

    def add(ident, s, i):
        b = buckets[s][i]
        pos_of[ident] = len(b)
        b.append(ident)
        slot_of[ident] = s
        patch_of[ident] = i
        cnt[s][i] += 1

    def remove(ident):
        s, i = slot_of[ident], patch_of[ident]
        b = buckets[s][i]
        p = pos_of[ident]
        last = b.pop()
        if last != ident:
            b[p] = last
            pos_of[last] = p
        cnt[s][i] -= 1

    ident = 0
    for s in range(4):
        for i in range(L):
            n = int(slot_counts0[s, i])
            if n == 0:
                continue
            if s == 1:
                eta, zeta = laws.H0.sample(rng, n)
            elif s == 2:
                eta, zeta = laws.F0.sample(rng, n), np.zeros(n)
            else:
                eta = zeta = np.zeros(n)
            for k in range(n):
                slot_of.append(s)
                patch_of.append(i)
                pos_of.append(0)
                pending.append(float(zeta[k]))
                add(ident, s, i)
                if s in (1, 2):
                    when = float(eta[k])
                    if not math.isfinite(when):
                        raise NumericalError("SCHEDULE_OVERFLOW", f"non-finite duration {when}")
                    heapq.heappush(heap, (when, ident, s))
                ident += 1

    log = EventLog() if log_events else None
    A = [0] * L
    n_grid = grid.size
    rec_counts = np.zeros((n_grid, 4, L), dtype=np.int64)
    rec_A = np.zeros((n_grid, L), dtype=np.int64)
    gi = 0

    def record_until(limit):
        nonlocal gi
        if gi < n_grid and grid[gi] < limit:
            snap = [[cnt[s][i] for i in range(L)] for s in range(4)]
            while gi < n_grid and grid[gi] < limit:
                for s in range(4):
                    rec_counts[gi, s2c[s]] = snap[s]
                rec_A[gi] = A
                gi += 1

    unif: list = []
    expo: list = []
    pool_eta: list = []
    pool_zeta: list = []
    H = laws.H
    t = 0.0
    piece = int(np.searchsorted(breaks, 0.0, side="right"))
    extinct_at = None

    while True:
        lam = lam_rows[piece]
        next_break = breaks[piece] if piece < len(breaks) else math.inf
        # current rates
        rates = []
        total = 0.0
        I = cnt[inf_slot]
        for i in range(L):
            si = cnt[0][i]
            r = 0.0
            if si and lam[i] > 0.0:
                press = 0.0
                row = kappa[i]
                for l in range(L):
                    if I[l]:
                        press += row[l] * I[l]
                if press > 0.0:
                    if gam == 0.0:
                        r = lam[i] * si * press / scale
                    else:
                        Bi = cnt[0][i] + cnt[1][i] + cnt[2][i] + cnt[3][i]
                        r = lam[i] * si * press / (scale * Bi**gam)
            rates.append(r)
            total += r
        for s in range(4):
            for i in range(L):
                r = out_rate[s][i] * cnt[s][i]
                rates.append(r)
                total += r

        if not expo:
            expo = rng.standard_exponential(_BLOCK).tolist()
            unif = rng.random(2 * _BLOCK).tolist()
        t_markov = t + expo.pop() / total if total > 0.0 else math.inf
        t_sched = heap[0][0] if heap else math.inf

        if stop_on_extinction and not heap and not any(cnt[1]) and not any(cnt[2]):
            extinct_at = t
            break
        if t_sched <= t_markov and t_sched <= next_break:
            if t_sched > T:
                break
            record_until(t_sched)
            t, who, s = heapq.heappop(heap)
            i = patch_of[who]
            remove(who)
            if s == 1:
                add(who, 2, i)
                when = t + pending[who]
                if not math.isfinite(when):
                    raise NumericalError("SCHEDULE_OVERFLOW", f"non-finite schedule at t={t}")
                heapq.heappush(heap, (when, who, 2))
                if log is not None:
                    log.add(t, PROGRESS, s2c[1], s2c[2], i, i, who)
            else:
                add(who, end_slot, i)
                if log is not None:
                    log.add(t, RECOVER, s2c[2], s2c[end_slot], i, i, who)
            continue
        if next_break <= t_markov:
            if next_break > T:
                break
            # memoryless: restart the race under the new rates
            t = next_break
            piece += 1
            continue
        if t_markov > T:
            break
        record_until(t_markov)
        t = t_markov
        if len(unif) < 3:
            unif.extend(rng.random(2 * _BLOCK).tolist())
        target = unif.pop() * total
        k = 0
        acc = rates[0]
        last = len(rates) - 1
        while acc <= target and k < last:
            k += 1
            acc += rates[k]
        while rates[k] == 0.0:  # guard against rounding at the top end
            k -= 1
        if k < L:
            i = k
            b = buckets[0][i]
            who = b[int(unif.pop() * len(b))]
            remove(who)
            A[i] += 1
            if not pool_eta:
                e, z = H.sample(rng, _BLOCK)
                pool_eta = e.tolist()
                pool_zeta = z.tolist()
            eta = pool_eta.pop()
            zeta = pool_zeta.pop()
            if has1:
                add(who, 1, i)
                pending[who] = zeta
                when = t + eta
                sched_slot = 1
            else:
                add(who, 2, i)
                when = t + zeta
                sched_slot = 2
            if not math.isfinite(when):
                raise NumericalError("SCHEDULE_OVERFLOW", f"non-finite schedule at t={t}")
            heapq.heappush(heap, (when, who, sched_slot))
            if log is not None:
                log.add(t, INFECT, 0, s2c[sched_slot], i, i, who)
        else:
            s, i = divmod(k - L, L)
            b = buckets[s][i]
            who = b[int(unif.pop() * len(b))]
            cum = dest_cum[s][i]
            u = unif.pop() * cum[-1]
            j = 0
            while cum[j] <= u and j < L - 1:
                j += 1
            while mig[s][i][j] == 0.0:
                j -= 1
            remove(who)
            add(who, s, j)
            if log is not None:
                log.add(t, MIGRATE, s2c[s], s2c[s], i, j, who)

    record_until(math.inf)
    panel = TrajectoryPanel(grid, rec_counts, rec_A, N, extinct_at)
    return panel, log


def replicate_seed(base_seed: int, r: int) -> np.random.SeedSequence:
    """Seed of replicate ``r``: numpy ``SeedSequence`` with entropy ``base_seed`` and spawn key ``(r,)``."""
    return np.random.SeedSequence(int(base_seed), spawn_key=(int(r),))


@dataclass
class EnsembleStats:
    """Per-grid-time mean and unbiased variance of compartment fractions and of ``A/N``."""

    times: np.ndarray
    M: int
    N: int
    mean: np.ndarray
    var: np.ndarray
    mean_A: np.ndarray
    var_A: np.ndarray
    panels: Optional[list] = None

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.var / self.M)


class Welford:
    """One-pass mean/variance accumulator; fed in a fixed order for reproducibility."""

    def __init__(self, shape):
        self.n = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def push(self, x):
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    @property
    def var(self):
        return self.m2 / (self.n - 1) if self.n > 1 else np.zeros_like(self.m2)


def _run_one(args):
    spec, laws, init, T, base_seed, r, grid, stop = args
    try:
        panel, _ = simulate(spec, laws, init, T, np.random.default_rng(replicate_seed(base_seed, r)),
                            grid=grid, log_events=False, stop_on_extinction=stop)
    except EpiError as exc:
        exc.details["replicate"] = r
        raise
    return panel


def run_replicates(
    spec: ModelSpec,
    laws: Laws,
    init_counts,
    T: float,
    base_seed: int,
    M: int,
    grid=None,
    *,
    keep_panels: bool = False,
    workers: int = 1,
    stop_on_extinction: bool = False,
) -> EnsembleStats:
    """Run ``M`` replicates and aggregate fractions on ``grid``.

    Panels are accumulated in replicate order whatever ``workers`` is, so the
    statistics are bitwise reproducible.
    """
    if M < 1:
        raise InputError("BAD_REPLICATES", "M must be >= 1")
    grid = np.arange(0.0, math.floor(T) + 1.0) if grid is None else np.asarray(grid, dtype=float)
    init = np.asarray(init_counts, dtype=np.int64)
    jobs = ((spec, laws, init, T, base_seed, r, grid, stop_on_extinction) for r in range(M))
    acc = Welford((grid.size, 4, spec.L))
    acc_A = Welford((grid.size, spec.L))
    kept = [] if keep_panels else None
    N = int(init.sum())

    def consume(panel):
        acc.push(panel.counts / N)
        acc_A.push(panel.A / N)
        if kept is not None:
            kept.append(panel)

    if workers <= 1:
        for job in jobs:
            consume(_run_one(job))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for panel in pool.map(_run_one, jobs, chunksize=max(1, M // (8 * workers))):
                consume(panel)
    return EnsembleStats(grid, M, N, acc.mean, acc.var, acc_A.mean, acc_A.var, kept)


def conditional_flow_estimate(log: EventLog, table, l: int, N: int, grid=None, *, T: Optional[float] = None):
    """Smoothed first- and second-phase landing flows of infections made in patch ``l``.

    Returns arrays ``(first, second)`` of shape (len(grid), L):
    ``N^-1 sum_j kernel(t - tau_j)`` over logged infection epochs ``tau_j`` in
    patch ``l``, with the first-phase landing kernel and the full-course
    kernel. ``grid`` must lie on the table grid.
    """
    if T is not None and abs(T - table.T) > 1e-9 * max(1.0, T):
        raise InputError("HORIZON_MISMATCH", f"log horizon {T} differs from table horizon {table.T}")
    grid = table.times if grid is None else np.asarray(grid, dtype=float)
    L = table.spec.L
    taus = log.infection_times(l)
    first = np.zeros((grid.size, L))
    second = np.zeros((grid.size, L))
    if taus.size == 0:
        return first, second
    PG, Phi = table.PG[:, l, :], table.Phi[:, l, :]
    gk = np.array([table.index(g) for g in grid])
    for g, k in enumerate(gk):
        lags = grid[g] - taus
        lags = lags[lags >= 0]
        # kernels are right-continuous step interpolants between grid points
        idx = np.floor(lags / table.dt + 1e-9).astype(np.int64)
        first[g] = PG[idx].sum(axis=0) / N
        second[g] = Phi[idx].sum(axis=0) / N
    return first, second
