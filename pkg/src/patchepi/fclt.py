"""Gaussian fluctuation limit around the fluid trajectory.

The engine has four stages:

1. ``linearization`` gives the derivative of the infection functional along
   the fluid path.
2. ``DriverCovariancePanel`` assembles the covariance functions of the noise
   sources.
3. ``sample_drivers`` draws joint paths block by block.
4. ``solve_fluctuations`` integrates the linear Volterra system driven by
   those paths.

Driver families (patch indices zero-based):

==========  =========  ====================================================
family      index      meaning
==========  =========  ====================================================
M_A         (i,)       infection counting martingale of patch i
M_S, M_R    (a, b)     S / END-slot migration martingales a -> b
M_E, M_I    (a, b)     first / second phase migration martingales a -> b
E0          (l, i)     first-phase ends in i of individuals initially in
                       the first phase in l
I01         (l, i)     second-phase ends in i of individuals initially in
                       the second phase in l
I02         (l, i)     second-phase ends in i of individuals initially in
                       the first phase in l
E, I        (l, i)     first / second phase ends in i of individuals
                       infected in l
==========  =========  ====================================================

With ``coupling="cohort"`` (default) every noise source generated by the
same group of individuals is sampled jointly. The group's second moments
come from an exact discrete-time version of one individual's course:
durations rounded up to the grid and chains stepped with the one-step
transition matrices. That makes every block covariance a genuine
covariance. ``coupling="independent"`` instead treats the infection and
phase-migration martingales as independent Brownian motions. It also
subtracts a product term from the flow cross-covariance.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InputError, NumericalError
from .fluid import FluidTrajectory, _block_diag
from .migration import TransitionKernelTable, generator
from .model import COMPARTMENTS, ModelSpec

log = logging.getLogger(__name__)

FAMILIES = ("M_A", "M_S", "M_E", "M_I", "M_R", "E0", "I01", "I02", "E", "I")
COUPLINGS = ("cohort", "independent")
JITTER_MAX = 1e-10
DEFAULT_MC_PAIRS = 1_000_000


# --------------------------------------------------------------------------
# linearization


@dataclass
class LinearizationField:
    """``coef[k, c, i]`` multiplies (S, E, I, R, distance) fluctuations of patch i.

    The distance term is ``sum_{j != i} kappa[i, j] * I_j``.
    """

    times: np.ndarray
    coef: np.ndarray
    kappa_off: np.ndarray

    def apply(self, k: int, comps: np.ndarray) -> np.ndarray:
        """Infection-functional fluctuation from ``comps`` of shape (4, L, ...)."""
        c = self.coef[k]
        dist = np.tensordot(self.kappa_off, comps[2], axes=(1, 0))
        out = dist * _bcast(c[4], dist)
        for n in range(4):
            out = out + _bcast(c[n], comps[n]) * comps[n]
        return out

    def row_map(self, k: int) -> np.ndarray:
        """Same map as an (L, 4L) matrix on comps flattened as (compartment, patch)."""
        L = self.kappa_off.shape[0]
        c = self.coef[k]
        M = np.zeros((L, 4 * L))
        for n in range(4):
            M[:, n * L:(n + 1) * L] = np.diag(c[n])
        M[:, 2 * L:3 * L] += c[4][:, None] * self.kappa_off
        return M


def _bcast(v, like):
    return v.reshape(v.shape + (1,) * (np.ndim(like) - 1))


def check_admissible(spec: ModelSpec) -> None:
    off = spec.kappa - np.diag(np.diag(spec.kappa))
    if spec.gamma == 1.0 and np.any(off > 0):
        raise InputError(
            "FCLT_INADMISSIBLE",
            "the diffusion limit is not available for gamma = 1 with infection at distance",
        )


def psi_partials(s, e, i, r, u, gamma):
    """Partial derivatives of ``s (i + u) / (s + e + i + r)^gamma``.

    Returns the five partials with respect to (s, e, i, r, u).
    """
    B = s + e + i + r
    inf = i + u
    top = B ** (1.0 + gamma)
    ds = inf * ((1.0 - gamma) * s + e + i + r) / top
    de = -gamma * s * inf / top
    di = (s * B - gamma * s * inf) / top
    du = s / B**gamma
    return ds, de, di, de, du  # R enters like E


def linearization(fluid: FluidTrajectory, spec: ModelSpec) -> LinearizationField:
    """Derivative of the infection functional along the fluid path."""
    check_admissible(spec)
    c = fluid.comps
    B = c.sum(axis=1)
    if np.any(B <= 0):
        raise NumericalError("EMPTY_PATCH", "patch mass vanishes along the fluid path")
    kap = spec.kappa
    off = kap - np.diag(np.diag(kap))
    u = c[:, 2] @ off.T  # sum_{j != i} kappa_ij I_j
    parts = psi_partials(c[:, 0], c[:, 1], c[:, 2], c[:, 3], u, spec.gamma)
    coef = np.stack(parts, axis=1)
    if not np.all(np.isfinite(coef)):
        raise NumericalError("NONFINITE_FIELD", "linearization coefficients are not finite")
    return LinearizationField(fluid.times.copy(), coef, off)


# --------------------------------------------------------------------------
# second moments of one individual's driver processes


class _Cohort:
    """Second moments, on grid lags, of the processes one individual generates.

    ``g[u]`` is the law of the first duration in grid steps, ``W[u, v]``
    the joint law of both durations (second index truncated at the
    horizon). ``p``/``q`` are transition tables indexed by step count.
    Process keys: ``("A",)`` the unit count, ``("LE", i)`` first-phase end in
    i, ``("LI", j)`` second-phase end in j, ``("mE", a, b)`` and ``("mI", a,
    b)`` compensated migration counts a -> b during either phase.
    """

    def __init__(self, origin, g, W, p, q, pairs1, pairs2, with_A, phase1):
        K, L, _ = p.shape
        self.K, self.L = K, L
        self.g, self.W, self.p, self.q = g, W, p, q
        self.P1, self.Q1 = p[1], q[1]
        pl = p[:, origin, :]
        self.pl = pl
        self.procs = ([("A",)] if with_A else [])
        if phase1:
            self.procs += [("LE", i) for i in range(L)]
        self.procs += [("LI", j) for j in range(L)]
        if phase1:
            self.procs += [("mE", a, b) for a, b in pairs1]
        self.procs += [("mI", a, b) for a, b in pairs2]
        self._cache = {}

        cumWq = np.cumsum(W[:, :, None, None] * q[None], axis=1)
        T = np.zeros((K, K, L, L))  # T[u, y] = sum_{v <= y-u} W[u, v] q^v
        for u in range(K):
            T[u, u:] = cumWq[u, : K - u]
        self.T = T
        self.PGd = np.cumsum(g[:, None] * pl, axis=0)
        self.Phid = np.einsum("uc,uycj->yj", pl, T)
        Gc = np.clip(1.0 - np.cumsum(g), 0.0, None)
        self.occ1 = Gc[:, None] * pl
        cumW = np.cumsum(W, axis=1)
        occ2 = np.zeros((K, L))
        for u in np.flatnonzero(g):
            stay = g[u] - cumW[u, : K - u]
            occ2[u:] += stay[:, None] * (pl[u] @ q[: K - u])
        self.occ2 = np.clip(occ2, 0.0, None)
        self.minidx = np.minimum.outer(np.arange(K), np.arange(K))

    # means ---------------------------------------------------------------
    def mean(self, key) -> np.ndarray:
        if key[0] == "A":
            return np.ones(self.K)
        if key[0] == "LE":
            return self.PGd[:, key[1]]
        if key[0] == "LI":
            return self.Phid[:, key[1]]
        return np.zeros(self.K)

    # second moments ------------------------------------------------------
    def moment(self, ka, kb) -> np.ndarray:
        """``E[X_a(x) X_b(y)]`` as a (K, K) array over lags (x, y)."""
        hit = self._cache.get((ka, kb))
        if hit is not None:
            return hit
        rev = self._cache.get((kb, ka))
        if rev is not None:
            return rev.T
        out = self._moment(ka, kb)
        self._cache[(ka, kb)] = out
        return out

    def _moment(self, ka, kb):
        order = {"A": 0, "LE": 1, "LI": 2, "mE": 3, "mI": 4}
        if order[ka[0]] > order[kb[0]]:
            return self._moment(kb, ka).T
        K, mi = self.K, self.minidx
        a, b = ka[0], kb[0]
        zero = np.zeros((K, K))
        if a == "A":
            if b == "A":
                return np.ones((K, K))
            if b == "LE":
                return np.broadcast_to(self.PGd[:, kb[1]][None, :], (K, K)).copy()
            if b == "LI":
                return np.broadcast_to(self.Phid[:, kb[1]][None, :], (K, K)).copy()
            return zero
        if a == "LE":
            if b == "LE":
                return self.PGd[:, ka[1]][mi] if ka[1] == kb[1] else zero
            if b == "LI":
                return self._landing_pair(ka[1], kb[1])
            if b == "mE":
                return self._mig_first_landing(kb[1], kb[2], ka[1]).T
            return zero
        if a == "LI":
            if b == "LI":
                return self.Phid[:, ka[1]][mi] if ka[1] == kb[1] else zero
            if b == "mE":
                return self._mig_first_second(kb[1], kb[2], ka[1]).T
            if b == "mI":
                return self._mig_second_landing(kb[1], kb[2], ka[1]).T
            return zero
        if a == "mE":
            if b == "mE":
                return self._mig_self(self.occ1, self.P1, ka, kb)
            return zero
        if a == "mI" and b == "mI":
            return self._mig_self(self.occ2, self.Q1, ka, kb)
        return zero

    def _landing_pair(self, i, j):
        # E[1{first end in i by x} 1{second end in j by y}]
        return np.cumsum(self.pl[:, i][:, None] * self.T[:, :, i, j], axis=0)

    def _mig_self(self, occ, step, ka, kb):
        (_, a, b), (_, c, d) = ka, kb
        if a != c:
            return np.zeros((self.K, self.K))
        const = (step[a, b] if b == d else 0.0) - step[a, b] * step[a, d]
        f = np.concatenate([[0.0], np.cumsum(occ[:, a])])[: self.K]  # f[n] = sum_{r<n}
        return const * f[self.minidx]

    def _jump_kernel(self, row, tab, a, b, i):
        """``J[w, u] = sum_{r<w} row[r] step[a,b] (tab^{u-r-1}[b,i] - tab^{u-r}[a,i])`` for w <= u."""
        K = self.K
        step = tab[1][a, b]
        D = np.zeros(K)
        D[1:] = step * (tab[:-1, b, i] - tab[1:, a, i])
        lag = np.subtract.outer(np.arange(K), np.arange(K)).T  # lag[r, u] = u - r
        M = np.where(lag > 0, row[:, None] * D[np.clip(lag, 0, K - 1)], 0.0)
        J = np.zeros((K, K))
        J[1:] = np.cumsum(M, axis=0)[:-1]
        return J[self.minidx, np.arange(K)[None, :]]  # J[min(x, u), u]

    def _mig_first_landing(self, a, b, i):
        # E[mE_ab(x) 1{first end in i by y}]
        Jm = self._jump_kernel(self.pl[:, a], self.p, a, b, i)
        return np.cumsum(self.g[None, :] * Jm, axis=1)

    def _mig_first_second(self, a, b, j):
        # E[mE_ab(x) 1{second end in j by y}]
        out = np.zeros((self.K, self.K))
        for c in range(self.L):
            Jm = self._jump_kernel(self.pl[:, a], self.p, a, b, c)
            out += Jm @ self.T[:, :, c, j]
        return out

    def _mig_second_landing(self, a, b, j):
        # E[mI_ab(x) 1{second end in j by y}]
        K = self.K
        out = np.zeros((K, K))
        rows = np.flatnonzero(self.W.any(axis=1))
        for c in range(self.L):
            weight = self.pl[:, c]
            if not np.any(weight[rows]):
                continue
            Jm = self._jump_kernel(self.q[:, c, a], self.q, a, b, j)
            for u in rows:
                if weight[u] == 0.0:
                    continue
                Gu = self.W[u][None, :] * Jm[: K - u, :]
                out[u:, u:] += weight[u] * np.cumsum(Gu, axis=1)[:, : K - u]
        return out


class _KernelCohort(_Cohort):
    """Moments read from the continuous kernel table, used by the independent coupling."""

    def __init__(self, origin, table: TransitionKernelTable, initial: bool, second_only: bool, K: int):
        L = table.spec.L
        self.K, self.L = K, L
        self.minidx = np.minimum.outer(np.arange(K), np.arange(K))
        self._cache = {}
        if second_only:
            self.PGd = np.zeros((K, L))
            self.Phid = table.QF0[:K, origin, :]
            self.X = None
            self.procs = [("LI", j) for j in range(L)]
        else:
            self.PGd = (table.PG0 if initial else table.PG)[:K, origin, :]
            self.Phid = (table.Phi0 if initial else table.Phi)[:K, origin, :]
            X = table.cross0 if initial else table.cross
            self.X = X[origin][:, :, :K, :K]
            phase1 = table.spec.layout.has_phase1
            self.procs = ([("LE", i) for i in range(L)] if phase1 else []) + [("LI", j) for j in range(L)]
        self.subtract = not initial

    def _landing_pair(self, i, j):
        K = self.K
        mi = self.minidx
        if self.subtract:
            # X(min(x, y), y) minus the product term of the independent-driver form
            cols = np.broadcast_to(np.arange(K)[None, :], (K, K))
            return self.X[i, j][mi, cols] - self.PGd[:, i][mi] * self.Phid[:, j][None, :]
        return self.X[i, j]


# --------------------------------------------------------------------------
# blocks and the covariance panel


@dataclass
class _Block:
    """Jointly Gaussian group of driver processes, independent of other blocks."""

    key: tuple
    procs: list
    kind: str  # "flow" (integrated against dA), "mass" (centered, scaled) or "brownian"
    cohort: Optional[_Cohort] = None
    dA: Optional[np.ndarray] = None
    mass: float = 0.0
    clock: Optional[np.ndarray] = None  # brownian time change on the grid
    _cov: Optional[np.ndarray] = None

    def covariance(self, K: int) -> np.ndarray:
        """Stacked covariance ``C[p, q, j, k]`` over processes and grid nodes."""
        if self._cov is not None:
            return self._cov
        n = len(self.procs)
        if self.kind == "brownian":
            mi = np.minimum.outer(np.arange(K), np.arange(K))
            C = self.clock[mi][None, None]
        else:
            coh = self.cohort
            M = np.empty((n, n, K, K))
            for a in range(n):
                for b in range(a, n):
                    M[a, b] = coh.moment(self.procs[a], self.procs[b])
                    M[b, a] = M[a, b].T
            if self.kind == "mass":
                means = np.stack([coh.mean(k) for k in self.procs])
                C = self.mass * (M - means[:, None, :, None] * means[None, :, None, :])
            else:
                C = np.zeros_like(M)
                for m in range(1, K):
                    dA = self.dA[m]
                    if dA == 0.0:
                        continue
                    C[:, :, m:, m:] += 0.5 * dA * (M[:, :, 1: K - m + 1, 1: K - m + 1] + M[:, :, : K - m, : K - m])
            # exact symmetry between (a, b, j, k) and (b, a, k, j)
            C = 0.5 * (C + C.transpose(1, 0, 3, 2))
        self._cov = C
        return C


class DriverCovariancePanel:
    """Covariance functions of all driver families on the fluid grid.

    Parameters
    ----------
    spec, table, fluid:
        Model, kernel table and fluid trajectory on one shared grid.
    coupling:
        ``"cohort"`` or ``"independent"`` (see the module docstring).
    mc_pairs, mc_seed:
        Monte Carlo size and seed for the joint duration law on the grid
        when the two periods are dependent.
    """

    def __init__(self, spec: ModelSpec, table: TransitionKernelTable, fluid: FluidTrajectory,
                 coupling: str = "cohort", *, mc_pairs: int = DEFAULT_MC_PAIRS, mc_seed: int = 7):
        if coupling not in COUPLINGS:
            raise InputError("UNKNOWN_COUPLING", f"coupling must be one of {COUPLINGS}")
        check_admissible(spec)
        if abs(table.dt - fluid.dt) > 1e-12 or fluid.K > table.K:
            raise InputError("GRID_MISMATCH", "fluid and kernel table grids differ")
        self.spec, self.table, self.fluid, self.coupling = spec, table, fluid, coupling
        self.K = fluid.K
        self.dt = fluid.dt
        self.times = fluid.times
        self.layout = spec.layout
        self._mc = (mc_pairs, mc_seed)
        self.blocks: dict = {}
        self._build()

    # construction --------------------------------------------------------
    def _grid_laws(self, joint, K):
        """Grid-step laws of (first, second) duration by rounding up to the grid."""
        dt = self.dt
        ga, gc = joint.exposed.grid_masses(dt, K)
        fa, fc = joint.infectious.grid_masses(dt, K)
        g, f = ga + gc, fa + fc
        if joint.mode == "product":
            return g, np.outer(g, f)
        n, seed = self._mc
        eta, zeta = joint.sample(np.random.default_rng(seed), n)
        iu = np.ceil(eta / dt - 1e-9).astype(np.int64)
        iv = np.ceil(zeta / dt - 1e-9).astype(np.int64)
        g = np.bincount(np.minimum(iu, K), minlength=K + 1)[:K] / n
        keep = (iu < K) & (iv < K)
        W = np.zeros((K, K))
        np.add.at(W, (iu[keep], iv[keep]), 1.0 / n)
        return g, W

    def _build(self):
        spec, table, fluid, K = self.spec, self.table, self.fluid, self.K
        L = spec.L
        lay = self.layout
        rates = spec.slot_rates()
        pairs1 = [(a, b) for a in range(L) for b in range(L) if rates[1][a, b] > 0]
        pairs2 = [(a, b) for a in range(L) for b in range(L) if rates[2][a, b] > 0]
        x0 = fluid.slots[0]
        p, q = table.p[:K], table.q[:K]
        dA = np.diff(fluid.A, axis=0, prepend=0.0)
        laws = table.laws

        # Brownian time changes: nu * int of the fluid slot mass
        integ = np.zeros((K, 4, L))
        integ[1:] = np.cumsum(0.5 * self.dt * (fluid.slots[1:] + fluid.slots[:-1]), axis=0)
        bm_slots = {"M_S": 0, "M_R": 3}
        if self.coupling == "independent":
            bm_slots.update({"M_E": 1, "M_I": 2})
            for i in range(L):
                if np.any(fluid.A[:, i] > 0):
                    self._add(_Block(("M_A", i), [("B",)], "brownian", clock=fluid.A[:, i].copy()))
        for name, s in bm_slots.items():
            for a in range(L):
                for b in range(L):
                    if rates[s][a, b] > 0:
                        clock = rates[s][a, b] * integ[:, s, a]
                        if np.any(clock > 0):
                            self._add(_Block((name, a, b), [("B",)], "brownian", clock=clock))

        if self.coupling == "cohort":
            g, W = self._grid_laws(laws.H, K)
            g0, W0 = self._grid_laws(laws.H0, K)
            f0 = np.sum(laws.F0.grid_masses(self.dt, K), axis=0)
            for l in range(L):
                if np.any(dA[:, l] > 0):
                    coh = _Cohort(l, g, W, p, q, pairs1, pairs2, True, lay.has_phase1)
                    self._add(_Block(("new", l), coh.procs, "flow", coh, dA=dA[:, l]))
                if lay.has_phase1 and x0[1, l] > 0:
                    coh = _Cohort(l, g0, W0, p, q, pairs1, pairs2, False, True)
                    self._add(_Block(("initE", l), coh.procs, "mass", coh, mass=x0[1, l]))
                if x0[2, l] > 0:
                    g_now = np.zeros(K)
                    g_now[0] = 1.0
                    W_now = np.zeros((K, K))
                    W_now[0] = f0
                    coh = _Cohort(l, g_now, W_now, p, q, [], pairs2, False, False)
                    self._add(_Block(("initI", l), coh.procs, "mass", coh, mass=x0[2, l]))
        else:
            if table.cross is None:
                raise InputError("NO_CROSS_TABLE", "the independent coupling needs a table built with cross=True")
            for l in range(L):
                if np.any(dA[:, l] > 0):
                    coh = _KernelCohort(l, table, False, False, K)
                    self._add(_Block(("new", l), coh.procs, "flow", coh, dA=dA[:, l]))
                if lay.has_phase1 and x0[1, l] > 0:
                    coh = _KernelCohort(l, table, True, False, K)
                    self._add(_Block(("initE", l), coh.procs, "mass", coh, mass=x0[1, l]))
                if x0[2, l] > 0:
                    coh = _KernelCohort(l, table, True, True, K)
                    self._add(_Block(("initI", l), coh.procs, "mass", coh, mass=x0[2, l]))

    def _add(self, block):
        self.blocks[block.key] = block

    # family bookkeeping ---------------------------------------------------
    def components(self, family: str, idx) -> list:
        """(block key, process key) pairs whose sum is the family member."""
        if family not in FAMILIES:
            raise InputError("UNKNOWN_FAMILY", f"{family!r} is not one of {FAMILIES}")
        idx = tuple(int(v) for v in np.atleast_1d(idx))
        L = self.spec.L
        want = 1 if family == "M_A" else 2
        if len(idx) != want or any(not 0 <= v < L for v in idx):
            raise InputError("BAD_INDEX", f"{family} needs {want} patch indices in [0, {L})")
        B = self.blocks
        out = []

        def add(bkey, pkey):
            if bkey in B and pkey in B[bkey].procs:
                out.append((bkey, pkey))

        if family == "M_A":
            if self.coupling == "independent":
                add(("M_A", idx[0]), ("B",))
            else:
                add(("new", idx[0]), ("A",))
        elif family in ("M_S", "M_R") or (family in ("M_E", "M_I") and self.coupling == "independent"):
            add((family,) + idx, ("B",))
        elif family in ("M_E", "M_I"):
            tag = "mE" if family == "M_E" else "mI"
            for kind in ("new", "initE", "initI"):
                for l in range(L):
                    add((kind, l), (tag,) + idx)
        else:
            l, i = idx
            if family == "E" and not self.layout.has_phase1:
                # no first phase: landing in the second phase is the infection itself
                if l == i:
                    return self.components("M_A", (l,))
                return []
            bkind = {"E0": "initE", "I01": "initI", "I02": "initE", "E": "new", "I": "new"}[family]
            tag = "LE" if family in ("E0", "E") else "LI"
            add((bkind, l), (tag, i))
        return out

    def independent(self, fa: str, ia, fb: str, ib) -> bool:
        """True when the two family members share no block."""
        ka = {c[0] for c in self.components(fa, ia)}
        kb = {c[0] for c in self.components(fb, ib)}
        return not (ka & kb)

    def covariance_matrix(self, fa, ia, fb, ib) -> np.ndarray:
        """(K, K) covariance between two family members over all grid pairs."""
        out = np.zeros((self.K, self.K))
        for bka, pa in self.components(fa, ia):
            for bkb, pb in self.components(fb, ib):
                if bka != bkb:
                    continue
                blk = self.blocks[bka]
                C = blk.covariance(self.K)
                out += C[blk.procs.index(pa), blk.procs.index(pb)]
        return out

    def index(self, t: float) -> int:
        k = t / self.dt
        kr = int(round(k))
        if abs(k - kr) > 1e-9 * max(1.0, abs(k)) or not 0 <= kr < self.K:
            raise InputError("OFF_GRID", f"t={t} is not a grid point (dt={self.dt})")
        return kr


def driver_covariance(panel: DriverCovariancePanel, family, idx, t, family2, idx2, t2) -> float:
    """Covariance between two driver family members at grid times ``t`` and ``t2``."""
    j, k = panel.index(t), panel.index(t2)
    return float(panel.covariance_matrix(family, idx, family2, idx2)[j, k])


# --------------------------------------------------------------------------
# sampling


@dataclass
class DriverPaths:
    """Sampled driver paths: ``families[name]`` has shape (P, K, L) or (P, K, L, L)."""

    times: np.ndarray
    families: dict
    P: int

    def get(self, family, idx) -> np.ndarray:
        arr = self.families[family]
        return arr[(slice(None), slice(None)) + tuple(np.atleast_1d(idx))]


def _factor(C: np.ndarray, key) -> tuple[np.ndarray, np.ndarray]:
    """Cholesky factor over the coordinates with positive variance."""
    d = np.diag(C)
    scale = float(np.trace(C))
    live = np.flatnonzero(d > 1e-14 * max(scale, 1e-300))
    sub = C[np.ix_(live, live)]
    tr = float(np.trace(sub))
    for jitter in (0.0, 1e-14, 1e-13, 1e-12, 1e-11, JITTER_MAX):
        try:
            return live, np.linalg.cholesky(sub + jitter * tr * np.eye(live.size))
        except np.linalg.LinAlgError:
            continue
    low = float(np.linalg.eigvalsh(sub)[0])
    raise NumericalError("NOT_PSD", f"block {key}: smallest eigenvalue {low:.3e} (trace {tr:.3e})",
                         min_eigenvalue=low)


def sample_drivers(panel: DriverCovariancePanel, P: int, seed: int = 0, *, chunk: int = 2000) -> DriverPaths:
    """Draw ``P`` joint driver path sets on the panel grid.

    Each block is sampled from its own stream seeded by ``(seed, block
    number, chunk number)``, so results do not depend on how work is split.
    """
    K, L = panel.K, panel.spec.L
    fam = {f: np.zeros((P, K, L) if f == "M_A" else (P, K, L, L)) for f in FAMILIES}
    members = [(f, (i,)) for f in ("M_A",) for i in range(L)]
    members += [(f, (a, b)) for f in FAMILIES if f != "M_A" for a in range(L) for b in range(L)]
    where = {}  # (block key, process key) -> list of family members
    for f, idx in members:
        for comp in panel.components(f, idx):
            where.setdefault(comp, []).append((f, idx))

    for b_no, (bkey, blk) in enumerate(sorted(panel.blocks.items(), key=lambda kv: repr(kv[0]))):
        n = len(blk.procs)
        C = blk.covariance(K)[:, :, 1:, 1:]
        flat = C.transpose(0, 2, 1, 3).reshape(n * (K - 1), n * (K - 1))
        live, Lc = _factor(flat, bkey)
        for c_no, start in enumerate(range(0, P, chunk)):
            m = min(chunk, P - start)
            rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(b_no, c_no)))
            Z = rng.standard_normal((live.size, m))
            X = np.zeros((n * (K - 1), m))
            X[live] = Lc @ Z
            X = X.reshape(n, K - 1, m)
            for pi, pkey in enumerate(blk.procs):
                for f, idx in where.get((bkey, pkey), ()):
                    fam[f][(slice(start, start + m), slice(1, None)) + idx] += X[pi].T
    return DriverPaths(panel.times.copy(), fam, P)


# --------------------------------------------------------------------------
# the linear Volterra system


@dataclass
class FluctuationEnsemble:
    """Sampled fluctuation paths.

    ``comps[p, k, c, i]`` in (S, E, I, R) order, ``ups`` and ``A`` of shape
    (P, K, L). ``residual`` is the largest step-equation residual.
    """

    times: np.ndarray
    comps: np.ndarray
    ups: np.ndarray
    A: np.ndarray
    residual: float

    @property
    def P(self) -> int:
        return self.comps.shape[0]

    def variance(self, comp: str, patch: int) -> np.ndarray:
        c = COMPARTMENTS.index(comp)
        return self.comps[:, :, c, patch].var(axis=0, ddof=1)

    def covariance_at(self, k: int) -> np.ndarray:
        """(4L, 4L) sample covariance of all compartments at grid index ``k``."""
        X = self.comps[:, k].reshape(self.P, -1)
        return np.cov(X, rowvar=False)


def _slot_drivers(paths: DriverPaths, layout) -> np.ndarray:
    """Combine family paths into additive forcing per slot: (P, K, 4, L)."""
    f = paths.families
    MA = f["M_A"]
    if layout.has_phase1:
        land1 = (f["E0"] + f["E"]).sum(axis=2)
    else:
        land1 = MA.copy()
    land2 = (f["I01"] + f["I02"] + f["I"]).sum(axis=2)

    def net(M):  # sum_l (M[l, i] - M[i, l])
        return M.sum(axis=2) - M.sum(axis=3)

    out = np.zeros(MA.shape[:2] + (4, MA.shape[2]))
    r = layout.recycle
    out[:, :, 0] = -MA + net(f["M_S"]) + (land2 if r else 0.0)
    out[:, :, 1] = MA - land1 + net(f["M_E"])
    out[:, :, 2] = land1 - land2 + net(f["M_I"])
    out[:, :, 3] = (0.0 if r else land2) + net(f["M_R"])
    return out


def initial_fluctuations(spec: ModelSpec, P: int, variances=None, seed: int = 0) -> np.ndarray:
    """Initial fluctuations (P, 4, L): zero, or independent Gaussians with given variances."""
    out = np.zeros((P, 4, spec.L))
    if variances is None:
        return out
    v = np.asarray(variances, dtype=float)
    if v.shape != (4, spec.L) or np.any(v < 0):
        raise InputError("BAD_INIT", "initial fluctuation variances must be (4, L) and >= 0")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(99,)))
    return rng.standard_normal((P, 4, spec.L)) * np.sqrt(v)[None]


def solve_fluctuations(paths: DriverPaths, field_: LinearizationField, table: TransitionKernelTable,
                       fluid: FluidTrajectory, spec: ModelSpec, initial=None, *,
                       pooled_initial_indices: bool = True, check_residual: bool = True) -> FluctuationEnsemble:
    """Integrate the linear fluctuation system for every sampled path.

    Convolutions and migration use the same step weights and trapezoid rule
    as the fluid solver. Per step, the unknown cumulative-infection
    fluctuation solves an (L, L) system shared by all paths.
    ``initial`` is an optional (P, 4, L) array in (S, E, I, R) order. With
    ``pooled_initial_indices`` the initial first-phase fluctuation of patch i
    multiplies the summed kernels into i; otherwise each origin patch's own
    fluctuation is used.
    """
    K, L, P = fluid.K, spec.L, paths.P
    if paths.times.size != K or field_.times.size != K:
        raise InputError("GRID_MISMATCH", "drivers, field and fluid must share one grid")
    dt = fluid.dt
    lay = spec.layout
    order = list(lay.slot_to_comp)
    x0 = np.zeros((P, 4, L)) if initial is None else np.asarray(initial, dtype=float)[:, order]
    forcing = _slot_drivers(paths, lay)

    PG0, QF0, Phi0 = table.PG0[:K], table.QF0[:K], table.Phi0[:K]
    e0, i0 = x0[:, 1], x0[:, 2]
    p1_init = e0[:, None] - np.einsum("pl,kli->pki", e0, PG0)
    p2_init = i0[:, None] - np.einsum("pl,kli->pki", i0, QF0)
    end_init = np.einsum("pl,kli->pki", i0, QF0)
    if pooled_initial_indices:
        p2_init += e0[:, None] * (PG0 - Phi0).sum(axis=1)[None]
        end_init += e0[:, None] * Phi0.sum(axis=1)[None]
    else:
        p2_init += np.einsum("pl,kli->pki", e0, PG0 - Phi0)
        end_init += np.einsum("pl,kli->pki", e0, Phi0)

    w = np.concatenate([table.first.step_weights()[:K], table.both.step_weights()[:K]], axis=2)
    wflat = w.reshape(K * L, 2 * L)
    w_pg, w_phi = w[0][:, :L].T, w[0][:, L:].T
    eye = np.eye(L)
    r = 1.0 if lay.recycle else 0.0
    coupling = np.vstack([-eye + r * w_phi, eye - w_pg, w_pg - w_phi, (1 - r) * w_phi])
    mig = [generator(m).T for m in spec.slot_rates()]
    block_inv = _block_diag([np.linalg.inv(np.eye(L) - 0.5 * dt * g) for g in mig])
    block_gen = _block_diag(mig)
    coupling = block_inv @ coupling
    # slots -> (S, E, I, R) flattened
    perm = np.zeros((4 * L, 4 * L))
    for s, c in enumerate(order):
        perm[c * L:(c + 1) * L, s * L:(s + 1) * L] = eye

    X = np.zeros((K, 4 * L, P))
    Ahat = np.zeros((K, L, P))
    ups = np.zeros((K, L, P))
    Arev = np.zeros((K, L, P))
    X[0] = x0.reshape(P, 4 * L).T
    F0 = field_.row_map(0) @ perm
    ups[0] = F0 @ X[0]
    mig_acc = np.zeros((4 * L, P))
    worst = 0.0
    for k in range(1, K):
        hist = wflat[L:(k + 1) * L].T @ Arev[K - k:].reshape(k * L, P)
        hist_pg, hist_phi = hist[:L], hist[L:]
        end_in = end_init[:, k].T + hist_phi
        mig_half = mig_acc + 0.5 * dt * (block_gen @ X[k - 1])
        known = np.concatenate([
            x0[:, 0].T + r * end_in,
            p1_init[:, k].T - hist_pg,
            p2_init[:, k].T + hist_pg - hist_phi,
            x0[:, 3].T + (1 - r) * end_in,
        ]) + forcing[:, k].reshape(P, 4 * L).T
        base = block_inv @ (known + mig_half)
        Fk = field_.row_map(k) @ perm
        h = 0.5 * dt * fluid.lam_cell[k][:, None]
        lhs = np.eye(L) - h * (Fk @ coupling)
        rhs = Ahat[k - 1] + h * (ups[k - 1] + Fk @ base)
        cond = np.linalg.cond(lhs)
        if not np.isfinite(cond) or cond > 1e12:
            raise NumericalError("SINGULAR_STEP", f"step {k}: condition estimate {cond:.3e}", condition=cond)
        Ahat[k] = np.linalg.solve(lhs, rhs)
        X[k] = base + coupling @ Ahat[k]
        ups[k] = Fk @ X[k]
        if check_residual:
            res = np.max(np.abs(Ahat[k] - Ahat[k - 1] - h * (ups[k - 1] + ups[k])), initial=0.0)
            worst = max(worst, float(res))
        Arev[K - 1 - k] = Ahat[k]
        mig_acc = mig_half + 0.5 * dt * (block_gen @ X[k])
    if check_residual and worst > 1e-9:
        raise NumericalError("RESIDUAL", f"step residual {worst:.3e} exceeds 1e-9")

    slots = X.reshape(K, 4, L, P).transpose(3, 0, 1, 2)
    comps = np.zeros_like(slots)
    comps[:, :, order] = slots
    return FluctuationEnsemble(fluid.times.copy(), comps, ups.transpose(2, 0, 1), Ahat.transpose(2, 0, 1), worst)


def run_fclt(spec, table, fluid, P: int, seed: int = 0, *, coupling: str = "cohort",
             initial_variances=None, pooled_initial_indices: bool = True):
    """Linearize, build the panel, sample drivers and solve; returns (panel, paths, ensemble)."""
    field_ = linearization(fluid, spec)
    panel = DriverCovariancePanel(spec, table, fluid, coupling)
    paths = sample_drivers(panel, P, seed)
    init = initial_fluctuations(spec, P, initial_variances, seed)
    ens = solve_fluctuations(paths, field_, table, fluid, spec, init, pooled_initial_indices=pooled_initial_indices)
    return panel, paths, ens
