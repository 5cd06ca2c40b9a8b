"""Deterministic large-population limit.

The limit is a Volterra system in the cumulative infection ``A_i(t) =
int_0^t lam_i Ups_i``. Each convolution ``int K(t-s) dA(s)`` is written as
``sum_m w[m] A(t_{k-m})`` with the kernel's step weights, so only the
``m = 0`` term is implicit; that term together with the trapezoid rule for
``A`` and for migration is resolved by Picard iteration on ``A(t_k)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericalError
from .migration import TransitionKernelTable, generator, transition_table
from .model import InitialCondition, ModelSpec, check_initial

log = logging.getLogger(__name__)

PICARD_TOL = 1e-12
PICARD_MAX_ITER = 50


@dataclass
class FluidTrajectory:
    """Fractions on the grid.

    ``slots[k, s, i]`` is in slot order, ``comps[k, c, i]`` in (S, E, I, R)
    order. ``A`` is the cumulative infection fraction, ``ups`` the infection
    functional and ``lam_cell[k]`` the rates in force on ``(t_{k-1}, t_k]``.
    """

    dt: float
    times: np.ndarray
    slots: np.ndarray
    comps: np.ndarray
    ups: np.ndarray
    A: np.ndarray
    lam_cell: np.ndarray
    lower_bound: np.ndarray
    diagnostics: list = field(default_factory=list)
    iterations: np.ndarray = None

    @property
    def K(self) -> int:
        return self.times.size

    @property
    def S(self):
        return self.comps[:, 0]

    @property
    def E(self):
        return self.comps[:, 1]

    @property
    def I(self):
        return self.comps[:, 2]

    @property
    def R(self):
        return self.comps[:, 3]

    @property
    def patch_mass(self):
        return self.comps.sum(axis=1)

    def rows(self):
        """(time, patch, Sbar, Ebar, Ibar, Rbar, Upsbar, Abar) rows, one-based patches."""
        for k in range(self.K):
            for i in range(self.comps.shape[2]):
                c = self.comps[k, :, i]
                yield (float(self.times[k]), i + 1, *map(float, c), float(self.ups[k, i]), float(self.A[k, i]))


def _init_array(spec: ModelSpec, init) -> np.ndarray:
    if isinstance(init, InitialCondition):
        x = init.fractions
    else:
        x = np.asarray(init, dtype=float)
        if x.shape != (4, spec.L) or np.any(x < 0) or abs(x.sum() - 1.0) > 1e-9:
            raise InputError("BAD_INIT", "initial fractions must be (4, L), >= 0 and sum to 1")
    check_initial(spec, x)
    return x


def _steps(dt: float, T: float, K_max: int) -> int:
    n = T / dt
    K = int(round(n)) + 1
    if abs(n - (K - 1)) > 1e-9 * max(1.0, n) or K > K_max:
        raise InputError("GRID_MISMATCH", f"T={T} is not a grid point of the kernel table (dt={dt})")
    return K


def _lam_cells(spec: ModelSpec, times: np.ndarray) -> np.ndarray:
    out = np.zeros((times.size, spec.L))
    for k in range(1, times.size):
        out[k] = spec.lam_at(0.5 * (times[k - 1] + times[k]))
    return out


def lower_bound(spec: ModelSpec, mass0: np.ndarray, times: np.ndarray) -> np.ndarray:
    """``U_i(0) exp(-sum_l nubar_il t)`` with ``nubar`` the entrywise max migration rate."""
    rate = spec.nu_max().sum(axis=1)
    return mass0[None, :] * np.exp(-np.outer(times, rate))


class _StepSolver:
    """Shared per-step machinery: pressure with clamped denominators and Picard on A."""

    def __init__(self, spec, dt, times, x0):
        self.spec = spec
        self.dt = dt
        self.layout = spec.layout
        self.lam_cell = _lam_cells(spec, times)
        self.bound = lower_bound(spec, x0.sum(axis=0), times)
        self.diagnostics = []
        L = spec.L
        self.mig = [generator(m).T for m in spec.slot_rates()]
        self.solve_mig = [np.linalg.inv(np.eye(L) - 0.5 * dt * g) for g in self.mig]
        self.kappa = spec.kappa
        self.inf = self.layout.infectious_slot

    def pressure(self, k, slots):
        mass = slots.sum(axis=0)
        den = np.maximum(mass, 0.5 * self.bound[k])
        if self.spec.gamma != 0.0:
            den = den**self.spec.gamma
        else:
            den = np.ones_like(den)
        num = slots[0] * (self.kappa @ slots[self.inf])
        return np.divide(num, den, out=np.zeros_like(num), where=den > 0)

    def check_bound(self, slots):
        """Record every grid point where a patch mass falls below the lower bound."""
        mass = slots.sum(axis=1)
        bad = mass < self.bound[: mass.shape[0]] - 1e-9
        for k in np.flatnonzero(bad.any(axis=1)):
            self.diagnostics.append(
                f"patch mass below lower bound at t_{k}: patches {np.flatnonzero(bad[k]).tolist()}")
        if self.diagnostics:
            log.warning("lower bound violated at %d grid points", len(self.diagnostics))

    def picard(self, k, A_prev, ups_prev, guess, slots_of):
        """Fixed point of ``A = A_prev + dt/2 lam (ups_prev + ups(slots_of(A)))``."""
        lam = self.lam_cell[k]
        A = guess
        for it in range(1, PICARD_MAX_ITER + 1):
            slots = slots_of(A)
            ups = self.pressure(k, slots)
            A_new = A_prev + 0.5 * self.dt * lam * (ups_prev + ups)
            gap = np.max(np.abs(A_new - A)) if A.size else 0.0
            A = A_new
            if gap <= PICARD_TOL * max(1.0, float(np.max(np.abs(A)))):
                slots = slots_of(A)
                return A, slots, self.pressure(k, slots), it
        raise NumericalError("NO_CONVERGENCE", f"Picard iteration stalled at step {k} (gap {gap:.3e})")


def _block_diag(blocks):
    L = blocks[0].shape[0]
    out = np.zeros((len(blocks) * L, len(blocks) * L))
    for s, b in enumerate(blocks):
        out[s * L:(s + 1) * L, s * L:(s + 1) * L] = b
    return out


def solve_fluid(spec: ModelSpec, table: TransitionKernelTable, init, T: float | None = None,
                *, picard_start: str = "extrapolate") -> FluidTrajectory:
    """Solve the limit Volterra system on ``[0, T]`` on the table's grid.

    ``picard_start`` selects the initial iterate at each step:
    ``extrapolate`` (linear extrapolation of A) or ``zero`` (no new
    infections during the step).
    """
    if table.spec.L != spec.L or table.spec.variant != spec.variant:
        raise InputError("GRID_MISMATCH", "kernel table was built for a different model")
    x = _init_array(spec, init)
    dt = table.dt
    K = _steps(dt, table.T if T is None else T, table.K)
    L = spec.L
    layout = spec.layout
    x0 = x[list(layout.slot_to_comp)]  # slot order
    times = np.arange(K) * dt
    solver = _StepSolver(spec, dt, times, x0)
    recycle = layout.recycle

    PG0, QF0, Phi0 = table.PG0[:K], table.QF0[:K], table.Phi0[:K]
    p1_init = x0[1][None] - np.einsum("l,kli->ki", x0[1], PG0)
    p2_init = (x0[2][None] - np.einsum("l,kli->ki", x0[2], QF0)
               + np.einsum("l,kli->ki", x0[1], PG0 - Phi0))
    end_init = np.einsum("l,kli->ki", x0[2], QF0) + np.einsum("l,kli->ki", x0[1], Phi0)

    # stacked step weights [m, l, (PG | Phi)]
    w = np.concatenate([table.first.step_weights()[:K], table.both.step_weights()[:K]], axis=2)
    wflat = w.reshape(K * L, 2 * L)
    w_pg, w_phi = w[0][:, :L].T, w[0][:, L:].T  # implicit m = 0 terms, acting on A(t_k)
    Arev = np.zeros((K, L))  # Arev[K-1-k] = A(t_k)

    # every slot is affine in A(t_k): X = base + coupling @ A
    eye = np.eye(L)
    r = 1.0 if recycle else 0.0
    coupling = np.vstack([-eye + r * w_phi, eye - w_pg, w_pg - w_phi, (1 - r) * w_phi])
    block_inv = _block_diag(solver.solve_mig)
    block_gen = _block_diag(solver.mig)
    coupling = block_inv @ coupling

    slots = np.zeros((K, 4, L))
    A = np.zeros((K, L))
    ups = np.zeros((K, L))
    mig = np.zeros(4 * L)
    slots[0] = x0
    ups[0] = solver.pressure(0, x0)
    iters = np.zeros(K, dtype=int)

    for k in range(1, K):
        # convolution history sum_{m=1..k} w[m] A(t_{k-m})
        hist = Arev[K - k:].ravel() @ wflat[L: (k + 1) * L]
        hist_pg, hist_phi = hist[:L], hist[L:]
        end_in = end_init[k] + hist_phi
        mig_half = mig + 0.5 * dt * (block_gen @ slots[k - 1].ravel())
        known = np.concatenate([x0[0] + r * end_in, p1_init[k] - hist_pg,
                                p2_init[k] + hist_pg - hist_phi, x0[3] + (1 - r) * end_in])
        base = block_inv @ (known + mig_half)

        def slots_of(Ak):
            return (base + coupling @ Ak).reshape(4, L)

        if picard_start == "zero":
            guess = A[k - 1].copy()
        else:
            guess = 2 * A[k - 1] - A[k - 2] if k > 1 else A[k - 1].copy()
        A[k], slots[k], ups[k], iters[k] = solver.picard(k, A[k - 1], ups[k - 1], guess, slots_of)
        Arev[K - 1 - k] = A[k]
        mig = mig_half + 0.5 * dt * (block_gen @ slots[k].ravel())
    solver.check_bound(slots)

    comps = np.zeros_like(slots)
    comps[:, list(layout.slot_to_comp)] = slots
    return FluidTrajectory(dt, times, slots, comps, ups, A, solver.lam_cell, solver.bound,
                           solver.diagnostics, iters)


def solve_fluid_delay(spec: ModelSpec, t_exposed: float, t_infectious: float, init, T: float,
                      dt: float) -> FluidTrajectory:
    """Method-of-steps solver for fixed exposed and infectious periods.

    Remaining initial periods are uniform on ``(0, t_exposed)`` and
    ``(0, t_infectious)``. Every new-infection term is a delayed value of
    ``A`` weighted by a transition matrix at the delay, so only ``A(t_k)``
    itself is implicit.
    """
    if spec.variant != "SEIR":
        raise InputError("BAD_VARIANT", "the delay formulation is implemented for SEIR")
    ne, no = t_exposed / dt, t_infectious / dt
    n_e, n_o = int(round(ne)), int(round(no))
    if (abs(ne - n_e) > 1e-9 * max(1, ne) or abs(no - n_o) > 1e-9 * max(1, no)
            or n_e < 1 or n_o < 1):
        raise InputError("DELAY_OFF_GRID", f"periods ({t_exposed}, {t_infectious}) must be positive multiples of dt={dt}")
    x = _init_array(spec, init)
    K = int(round(T / dt)) + 1
    L = spec.L
    times = np.arange(K) * dt
    mig_rates = spec.slot_rates()
    p = transition_table(generator(mig_rates[1]), dt, max(K, n_e + 1))
    q = transition_table(generator(mig_rates[2]), dt, max(K, n_o + 1))
    pe, qo = p[n_e], q[n_o]
    peqo = pe @ qo

    def running(tab):
        cum = np.zeros_like(tab)
        cum[1:] = np.cumsum(0.5 * dt * (tab[1:] + tab[:-1]), axis=0)
        return cum

    pcum, qcum = running(p), running(q)
    # (1/period) int_0^{min(t, period)} of the transition matrices
    pbar = pcum[np.minimum(np.arange(K), n_e)] / t_exposed
    qbar = qcum[np.minimum(np.arange(K), n_o)] / t_infectious
    # (1/t_e) int_0^{min(t - t_o, t_e)} p(u) q(t_o) du, zero before t_o
    late = np.zeros((K, L, L))
    for k in range(n_o, K):
        late[k] = pcum[min(k - n_o, n_e)] @ qo / t_exposed

    E0, I0 = x[1], x[2]
    e_init = E0[None] - np.einsum("l,kli->ki", E0, pbar)
    i_init = (I0[None] - np.einsum("l,kli->ki", I0, qbar)
              + np.einsum("l,kli->ki", E0, pbar - late))
    r_init = np.einsum("l,kli->ki", I0, qbar) + np.einsum("l,kli->ki", E0, late)

    solver = _StepSolver(spec, dt, times, x)
    G = solver.mig
    Minv = solver.solve_mig
    st = np.zeros((K, 4, L))
    A = np.zeros((K, L))
    ups = np.zeros((K, L))
    st[0] = x
    ups[0] = solver.pressure(0, x)
    mig = np.zeros((4, L))
    iters = np.zeros(K, dtype=int)

    def delayed(k, n):
        return A[k - n] if k >= n else np.zeros(L)

    for k in range(1, K):
        landed_e = delayed(k, n_e) @ pe
        landed_r = delayed(k, n_e + n_o) @ peqo
        prev = st[k - 1]
        half = np.stack([mig[s] + 0.5 * dt * (G[s] @ prev[s]) for s in range(4)])
        fixed_e = e_init[k] - landed_e + half[1]
        fixed_i = Minv[2] @ (i_init[k] + landed_e - landed_r + half[2])
        fixed_r = Minv[3] @ (x[3] + r_init[k] + landed_r + half[3])

        def state_of(Ak):
            out = np.empty((4, L))
            out[0] = Minv[0] @ (x[0] - Ak + half[0])
            out[1] = Minv[1] @ (fixed_e + Ak)
            out[2] = fixed_i
            out[3] = fixed_r
            return out

        guess = 2 * A[k - 1] - A[k - 2] if k > 1 else A[k - 1].copy()
        A[k], st[k], ups[k], iters[k] = solver.picard(k, A[k - 1], ups[k - 1], guess, state_of)
        for s in range(4):
            mig[s] = half[s] + 0.5 * dt * (G[s] @ st[k, s])
    solver.check_bound(st)

    return FluidTrajectory(dt, times, st.copy(), st, ups, A, solver.lam_cell, solver.bound,
                           solver.diagnostics, iters)
