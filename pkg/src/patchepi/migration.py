"""Migration chains and the convolution kernels built from them.

Transition matrices come from uniformization. Kernels are tabulated on a
uniform grid ``t_k = k*dt`` and stored both as cumulative values and as the
per-step measure (point masses at grid points plus continuous cell masses),
which is what the Volterra solvers consume.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import signal, stats

from .errors import InputError
from .laws import DurationLaw, JointDurationLaw
from .model import Laws, ModelSpec

log = logging.getLogger(__name__)

UNIFORMIZATION_TAIL = 1e-12
KERNEL_MC_SAMPLES = 1_000_000
KERNEL_MC_SEED = 20240917
MAX_CROSS_POINTS = 2001


def generator(rates) -> np.ndarray:
    """Generator with the given off-diagonal rates and zero row sums."""
    Q = np.array(rates, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise InputError("DIM_MISMATCH", "rate matrix must be square")
    np.fill_diagonal(Q, 0.0)
    if np.any(Q < 0):
        raise InputError("NEGATIVE_RATE", "migration rates must be >= 0")
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


def transition_matrix(Q, t: float) -> np.ndarray:
    """``exp(Q t)`` for a generator ``Q`` by uniformization.

    The Poisson series is cut where the neglected tail drops below 1e-12;
    long horizons are split into pieces with ``rate * piece <= 30`` and the
    piece matrices multiplied.
    """
    if t < 0:
        raise InputError("NEGATIVE_TIME", f"t={t} < 0")
    Q = np.asarray(Q, dtype=float)
    L = Q.shape[0]
    rate = float(np.max(-np.diag(Q))) if L else 0.0
    if rate == 0.0 or t == 0.0:
        return np.eye(L)
    pieces = max(1, int(np.ceil(rate * t / 30.0)))
    tau = t / pieces
    step = np.eye(L) + Q / rate
    mean = rate * tau
    n_max = int(stats.poisson.isf(UNIFORMIZATION_TAIL, mean)) + 2
    weights = stats.poisson.pmf(np.arange(n_max + 1), mean)
    out = np.zeros((L, L))
    power = np.eye(L)
    for w in weights:
        out += w * power
        power = power @ step
    # the neglected tail is row-stochastic; put its mass on the last power
    out += (1.0 - weights.sum()) * power
    np.clip(out, 0.0, 1.0, out=out)
    return np.linalg.matrix_power(out, pieces)


def transition_table(Q, dt: float, K: int) -> np.ndarray:
    """``P(t_k)`` for ``k < K`` as successive powers of ``P(dt)``."""
    L = np.asarray(Q).shape[0]
    step = transition_matrix(Q, dt)
    out = np.empty((K, L, L))
    out[0] = np.eye(L)
    for k in range(1, K):
        out[k] = out[k - 1] @ step
    return out


def _nonzero_times(a: np.ndarray) -> np.ndarray:
    return np.flatnonzero(np.any(a.reshape(a.shape[0], -1) != 0, axis=1))


def mat_conv(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Discrete matrix convolution ``out[k] = sum_m A[m] @ B[k-m]``, truncated to K.

    Sparse operands (few nonzero time indices, e.g. point masses) are shifted
    exactly; dense ones go through FFT.
    """
    K = A.shape[0]
    out = np.zeros((K, A.shape[1], B.shape[2]))
    nzA, nzB = _nonzero_times(A), _nonzero_times(B)
    if nzA.size == 0 or nzB.size == 0:
        return out
    if nzA.size <= 64:
        for m in nzA:
            out[m:] += A[m] @ B[: K - m]
        return out
    if nzB.size <= 64:
        for m in nzB:
            out[m:] += np.einsum("kab,bc->kac", A[: K - m], B[m])
        return out
    full = signal.fftconvolve(A[:, :, :, None], B[:, None, :, :], axes=0)[:K]
    out = full.sum(axis=2)
    out[: nzA[0] + nzB[0]] = 0.0  # exact zeros the FFT only reproduces up to roundoff
    return out


@dataclass(frozen=True)
class KernelMeasure:
    """A matrix-valued measure on the grid.

    ``atom[k]`` is the mass at ``t_k``, ``cell[k]`` the continuous mass in
    ``(t_{k-1}, t_k]``. ``cum[k]`` is the measure of ``[0, t_k]``.
    """

    atom: np.ndarray
    cell: np.ndarray

    @property
    def cum(self) -> np.ndarray:
        return np.cumsum(self.atom + self.cell, axis=0)

    def step_weights(self) -> np.ndarray:
        """Weights ``w[m]`` with ``int K(t_k - s) dA(s) ~ sum_m w[m] A(t_{k-m})``.

        Point masses act by exact shifts; each cell's mass is split evenly
        between its two endpoints.
        """
        w = self.atom + 0.5 * self.cell
        w[:-1] += 0.5 * self.cell[1:]
        return w


def _weighted_measure(trans: np.ndarray, law: DurationLaw, dt: float) -> KernelMeasure:
    """Measure ``trans(u) law(du)`` discretized on the grid."""
    K = trans.shape[0]
    atom, cell = law.grid_masses(dt, K)
    avg = np.empty_like(trans)
    avg[0] = trans[0]
    avg[1:] = 0.5 * (trans[1:] + trans[:-1])
    return KernelMeasure(atom[:, None, None] * trans, cell[:, None, None] * avg)


def _product_kernel(first: KernelMeasure, second: KernelMeasure) -> KernelMeasure:
    """Convolution of two independent phase measures (matrix product in patches)."""
    K = first.atom.shape[0]
    atom = mat_conv(first.atom, second.atom)
    cell = mat_conv(first.atom, second.cell) + mat_conv(first.cell, second.atom)
    if np.any(first.cell) and np.any(second.cell):
        # continuous * continuous: average the second cumulative over each cell of the first
        Nc = np.cumsum(second.cell, axis=0)
        # cum[k] = sum_{m>=1} first.cell[m] @ 0.5 (Nc[k-m] + Nc[k-m+1])
        shifted = np.zeros_like(Nc)
        shifted[:-1] = 0.5 * (Nc[:-1] + Nc[1:])
        shifted[-1] = Nc[-1]
        cc_cum = mat_conv(first.cell, shifted)
        # first.cell[0] = 0, so index k draws from shifted[k-m] with m >= 1
        cc_cell = np.diff(cc_cum, axis=0, prepend=0.0)
        cell = cell + cc_cell
    return KernelMeasure(atom, cell)


def _mc_kernel(p_tab, q_tab, Q1, Q2, joint: JointDurationLaw, dt, n_samples, seed):
    """Monte Carlo estimate of the joint kernel with per-entry standard errors."""
    K, L, _ = p_tab.shape
    rng = np.random.default_rng(seed)
    s1 = np.zeros((K, L, L))
    s2 = np.zeros((K, L, L))
    done = 0
    chunk = max(1, min(n_samples, 200_000 // max(1, L * L)))
    while done < n_samples:
        n = min(chunk, n_samples - done)
        eta, zeta = joint.sample(rng, n)
        total = eta + zeta
        idx = np.ceil(total / dt - 1e-9).astype(np.int64)
        keep = idx < K
        W = _trans_at(p_tab, Q1, eta[keep], dt) @ _trans_at(q_tab, Q2, zeta[keep], dt)
        np.add.at(s1, idx[keep], W)
        np.add.at(s2, idx[keep], W * W)
        done += n
    mean = np.cumsum(s1, axis=0) / n_samples
    second = np.cumsum(s2, axis=0) / n_samples
    se = np.sqrt(np.maximum(second - mean**2, 0.0) / n_samples)
    cell = np.diff(mean, axis=0, prepend=0.0)
    return KernelMeasure(np.zeros_like(cell), cell), se


def _trans_at(tab, Q, t, dt):
    """Transition matrices at arbitrary times: grid value times a short Taylor step."""
    K = tab.shape[0]
    m = np.minimum(np.floor(t / dt).astype(np.int64), K - 1)
    delta = t - m * dt
    L = Q.shape[0]
    short = np.broadcast_to(np.eye(L), (t.size, L, L)).copy()
    term = short.copy()
    for n in range(1, 12):
        term = term @ Q * (delta / n)[:, None, None]
        short += term
    return tab[m] @ short


def _node_weights(law: DurationLaw, dt: float, K: int) -> np.ndarray:
    atom, cell = law.grid_masses(dt, K)
    w = atom + 0.5 * cell
    w[:-1] += 0.5 * cell[1:]
    return w


def _conditional_weights(joint: JointDurationLaw, dt: float, K: int) -> np.ndarray:
    """Joint node weights ``W[m, n]`` from the exposed law and conditional cdf."""
    if not joint.has_conditional_cdf:
        raise InputError("UNSUPPORTED_JOINT", f"{joint.mode} coupling has no conditional cdf here")
    g = _node_weights(joint.exposed, dt, K)
    grid = np.arange(K) * dt
    W = np.zeros((K, K))
    for m in np.flatnonzero(g):
        c = np.asarray(joint.conditional_cdf(grid, grid[m]), dtype=float)
        cell = np.diff(c, prepend=0.0)
        node = 0.5 * cell
        node[0] = c[0]
        node[:-1] += 0.5 * cell[1:]
        W[m] = g[m] * node
    return W


def _weighted_pair_kernel(p_tab, q_tab, W) -> np.ndarray:
    """``sum_{m+n<=k} W[m,n] p[m] @ q[n]`` as cell masses per grid index."""
    K, L, _ = p_tab.shape
    out = np.zeros((K, L, L))
    for m in np.flatnonzero(W.any(axis=1)):
        out[m:] += W[m, : K - m, None, None] * (p_tab[m] @ q_tab[: K - m])
    return out


@dataclass(frozen=True, eq=False)
class TransitionKernelTable:
    """Gridded transition matrices and kernels.

    Array layout is ``[k, origin, destination]``. ``p``/``q`` are the
    transition matrices of the first- and second-phase chains. The kernel
    measures are:

    - ``first``: ``p(u) G(du)``; its cumulative is the landing probability
      at the end of the first phase by time t.
    - ``first0``: the same with ``G0``.
    - ``second0``: ``q(v) F0(dv)``.
    - ``second``: ``q(v) F(dv)``.
    - ``both``/``both0``: landing at the end of the second phase for newly
      infected / initially first-phase individuals.
    """

    dt: float
    K: int
    spec: ModelSpec
    laws: Laws
    generators: tuple
    p: np.ndarray
    q: np.ndarray
    first: KernelMeasure
    first0: KernelMeasure
    second: KernelMeasure
    second0: KernelMeasure
    both: KernelMeasure
    both0: KernelMeasure
    both_se: np.ndarray
    both0_se: np.ndarray
    method: str
    cross: Optional[np.ndarray] = None
    cross0: Optional[np.ndarray] = None

    @property
    def T(self) -> float:
        return (self.K - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.K) * self.dt

    @property
    def PG(self):
        return self.first.cum

    @property
    def PG0(self):
        return self.first0.cum

    @property
    def QF(self):
        return self.second.cum

    @property
    def QF0(self):
        return self.second0.cum

    @property
    def Phi(self):
        return self.both.cum

    @property
    def Phi0(self):
        return self.both0.cum

    def index(self, t: float) -> int:
        """Grid index of ``t``; raises OFF_GRID when ``t`` is not a grid point."""
        k = t / self.dt
        kr = int(round(k))
        if abs(k - kr) > 1e-9 * max(1.0, abs(k)) or kr < 0 or kr >= self.K:
            raise InputError("OFF_GRID", f"t={t} is not on the grid dt={self.dt}, T={self.T}")
        return kr

    def to_rows(self):
        """Flat rows (t, l, i, p, q, PG0, PG, QF0, Phi0, Phi) for CSV export."""
        arrays = [self.p, self.q, self.PG0, self.PG, self.QF0, self.Phi0, self.Phi]
        L = self.spec.L
        for k in range(self.K):
            for l in range(L):
                for i in range(L):
                    yield (self.times[k], l + 1, i + 1) + tuple(float(a[k, l, i]) for a in arrays)


def build_kernel_table(
    spec: ModelSpec,
    laws: Laws,
    dt: float,
    T: float,
    *,
    monte_carlo: bool = True,
    mc_samples: int = KERNEL_MC_SAMPLES,
    mc_seed: int = KERNEL_MC_SEED,
    cross: bool = False,
) -> TransitionKernelTable:
    """Tabulate transition matrices and kernels on ``[0, T]`` with step ``dt``.

    Independent period pairs use exact Stieltjes sums for point masses and
    cell-averaged trapezoid sums for continuous parts. Dependent pairs use
    ``mc_samples`` Monte Carlo draws (recording standard errors) or, with
    ``monte_carlo=False``, a grid quadrature over the conditional cdf.
    ``cross=True`` also tabulates the two-time cross kernels.
    """
    if not dt > 0 or not T >= dt:
        raise InputError("BAD_GRID", f"need dt > 0 and T >= dt (dt={dt}, T={T})")
    K = int(round(T / dt)) + 1
    if abs((K - 1) * dt - T) > 1e-9 * max(1.0, T):
        raise InputError("BAD_GRID", f"T={T} is not a multiple of dt={dt}")
    gens = tuple(generator(m) for m in spec.slot_rates())
    p = transition_table(gens[1], dt, K)
    q = transition_table(gens[2], dt, K)
    first = _weighted_measure(p, laws.G, dt)
    first0 = _weighted_measure(p, laws.G0, dt)
    second = _weighted_measure(q, laws.F, dt)
    second0 = _weighted_measure(q, laws.F0, dt)

    L = spec.L
    zeros = np.zeros((K, L, L))
    if laws.joint_mode == "product":
        both = _product_kernel(first, second)
        both0 = _product_kernel(first0, second)
        se = se0 = zeros
        method = "quadrature"
    elif monte_carlo:
        both, se = _mc_kernel(p, q, gens[1], gens[2], laws.H, dt, mc_samples, mc_seed)
        both0, se0 = _mc_kernel(p, q, gens[1], gens[2], laws.H0, dt, mc_samples, mc_seed + 1)
        method = "monte-carlo"
    else:
        cells = _weighted_pair_kernel(p, q, _conditional_weights(laws.H, dt, K))
        cells0 = _weighted_pair_kernel(p, q, _conditional_weights(laws.H0, dt, K))
        both, both0 = KernelMeasure(zeros, cells), KernelMeasure(zeros.copy(), cells0)
        se = se0 = zeros
        method = "conditional-quadrature"

    X = X0 = None
    if cross:
        if K > MAX_CROSS_POINTS:
            raise InputError("GRID_TOO_FINE", f"cross kernels need K <= {MAX_CROSS_POINTS}, got {K}")
        X = _cross_kernel(p, q, laws.H, first, second, dt, laws.joint_mode)
        X0 = _cross_kernel(p, q, laws.H0, first0, second, dt, laws.joint_mode)
    return TransitionKernelTable(
        dt=float(dt), K=K, spec=spec, laws=laws, generators=gens, p=p, q=q,
        first=first, first0=first0, second=second, second0=second0,
        both=both, both0=both0, both_se=se, both0_se=se0, method=method,
        cross=X, cross0=X0,
    )


def _cross_kernel(p, q, joint, first, second, dt, mode):
    """``X[l, i, j, a, b] = int_0^{t_a} p_li(u) int_0^{t_b - u} q_ij(v) H(du, dv)``."""
    K, L, _ = p.shape
    out = np.zeros((L, L, L, K, K))
    if mode == "product":
        QF = second.cum  # [n, i, j]
        QFpad = np.concatenate([np.zeros((1, L, L)), QF])  # QFpad[n+1] = QF[n], QFpad[0] = 0 (negative lag)
        b = np.arange(K)
        for m in range(K):
            lag = b - m
            at = QFpad[np.clip(lag, -1, K - 1) + 1]  # [b, i, j]
            prev = QFpad[np.clip(lag + 1, -1, K - 1) + 1]
            contrib = first.atom[m][:, :, None, None] * np.moveaxis(at, 0, -1)[None]
            if m > 0 and np.any(first.cell[m]):
                avg = 0.5 * (at + prev)
                contrib = contrib + first.cell[m][:, :, None, None] * np.moveaxis(avg, 0, -1)[None]
            contrib[..., :m] = 0.0
            out[:, :, :, m, :] = contrib
        return np.cumsum(out, axis=3)
    W = _conditional_weights(joint, dt, K) if joint.has_conditional_cdf else None
    if W is None:
        raise InputError("UNSUPPORTED_JOINT", "cross kernels need a conditional cdf")
    # T[m, b, i, j] = sum_{n <= b-m} W[m,n] q_ij(n)
    for m in np.flatnonzero(W.any(axis=1)):
        cumq = np.cumsum(W[m, :, None, None] * q, axis=0)  # [n, i, j]
        lagged = np.zeros((K, L, L))
        lagged[m:] = cumq[: K - m]
        out[:, :, :, m, :] = p[m][:, :, None, None] * np.moveaxis(lagged, 0, -1)[None]
    return np.cumsum(out, axis=3)


def phi_cross(table: TransitionKernelTable, l: int, i: int, j: int, t: float, t2: float, initial: bool = False) -> float:
    """Cross kernel ``int_0^t p_li(u) int_0^{t2-u} q_ij(v) H(du, dv)`` (H0 when ``initial``).

    Patch indices are zero-based; ``t`` and ``t2`` must be grid points.
    """
    X = table.cross0 if initial else table.cross
    if X is None:
        raise InputError("NO_CROSS_TABLE", "build the table with cross=True")
    a, b = table.index(t), table.index(t2)
    return float(X[l, i, j, a, b])
