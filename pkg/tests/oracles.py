"""Independent reference computations used by the tests.

None of these share code with the package: ODE right-hand sides are written
out by hand, the CTMC oracle is a separate vectorized Gillespie loop and
matrix exponentials use a scaled Taylor series.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import integrate


def markov_seir_rhs(lam, kappa, gamma, alpha, beta, nus):
    """Right-hand side of the multi-patch SEIR ODE with exponential periods.

    ``nus`` is (nu_S, nu_E, nu_I, nu_R). State is flattened (4, L).
    """
    lam = np.asarray(lam, float)
    kappa = np.asarray(kappa, float)
    L = lam.size
    gens = []
    for nu in nus:
        nu = np.zeros((L, L)) if nu is None else np.array(nu, float)
        np.fill_diagonal(nu, 0.0)
        gens.append(nu.T - np.diag(nu.sum(axis=1)))

    def rhs(t, y):
        S, E, I, R = y.reshape(4, L)
        B = S + E + I + R
        inf = lam * S * (kappa @ I) / B**gamma
        dS = -inf + gens[0] @ S
        dE = inf - alpha * E + gens[1] @ E
        dI = alpha * E - beta * I + gens[2] @ I
        dR = beta * I + gens[3] @ R
        return np.concatenate([dS, dE, dI, dR])

    return rhs


def markov_seir(lam, kappa, gamma, alpha, beta, x0, times, nus=(None,) * 4):
    """Solve the Markovian ODE with a high-order Runge-Kutta method; returns (K, 4, L)."""
    x0 = np.asarray(x0, float)
    rhs = markov_seir_rhs(lam, kappa, gamma, alpha, beta, nus)
    sol = integrate.solve_ivp(rhs, (times[0], times[-1]), x0.ravel(), method="DOP853",
                              t_eval=times, rtol=1e-12, atol=1e-14)
    return sol.y.T.reshape(len(times), *x0.shape)


def series_expm(Q, t, terms=40):
    """exp(Q t) by scaling and squaring of a truncated Taylor series."""
    A = np.asarray(Q, float) * t
    norm = np.max(np.abs(A).sum(axis=1)) if A.size else 0.0
    s = max(0, int(math.ceil(math.log2(norm))) + 1) if norm > 0.5 else 0
    A = A / 2**s
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for n in range(1, terms):
        term = term @ A / n
        out = out + term
    for _ in range(s):
        out = out @ out
    return out


def erlang2_cdf(t):
    """Sum of two independent unit exponentials: 1 - e^-t (1 + t)."""
    return 1.0 - math.exp(-t) * (1.0 + t)


def quad_convolution(first_pdf, second_cdf, t):
    """P(first + second <= t) for independent durations by adaptive quadrature."""
    val, _ = integrate.quad(lambda u: first_pdf(u) * second_cdf(t - u), 0.0, t, epsabs=1e-13, epsrel=1e-13, limit=200)
    return val


def ctmc_final_sizes(lam, kappa, gamma, alpha, beta, nu, init, reps, seed):
    """Vectorized Gillespie for the Markovian SEIR chain with one migration matrix.

    Runs until no exposed or infectious individual remains and returns the
    number of new infections per replicate.
    """
    rng = np.random.default_rng(seed)
    lam = np.asarray(lam, float)
    kappa = np.asarray(kappa, float)
    nu = np.asarray(nu, float)
    L = lam.size
    pairs = [(a, b) for a in range(L) for b in range(L) if a != b and nu[a, b] > 0]
    # state change of every event type: infection, progression, recovery, migration
    delta = []
    for i in range(L):
        d = np.zeros((4, L), np.int64)
        d[0, i], d[1, i] = -1, 1
        delta.append(d)
    for i in range(L):
        d = np.zeros((4, L), np.int64)
        d[1, i], d[2, i] = -1, 1
        delta.append(d)
    for i in range(L):
        d = np.zeros((4, L), np.int64)
        d[2, i], d[3, i] = -1, 1
        delta.append(d)
    for c in range(4):
        for a, b in pairs:
            d = np.zeros((4, L), np.int64)
            d[c, a], d[c, b] = -1, 1
            delta.append(d)
    delta = np.stack(delta)
    state = np.broadcast_to(np.asarray(init, np.int64), (reps, 4, L)).copy()
    N = float(state[0].sum())
    infections = np.zeros(reps, dtype=np.int64)
    live = np.flatnonzero((state[:, 1] + state[:, 2]).sum(axis=1) > 0)
    while live.size:
        st = state[live].astype(float)
        S, E, I, R = st[:, 0], st[:, 1], st[:, 2], st[:, 3]
        B = S + E + I + R
        Bg = np.where(B > 0, B, 1.0) ** gamma
        cols = [lam * S * (I @ kappa.T) / (N ** (1 - gamma) * Bg), alpha * E, beta * I]
        cols += [nu[a, b] * st[:, c, a][:, None] for c in range(4) for a, b in pairs]
        cum = np.cumsum(np.concatenate(cols, axis=1), axis=1)
        u = rng.random(live.size) * cum[:, -1]
        ev = np.minimum((cum <= u[:, None]).sum(axis=1), cum.shape[1] - 1)
        state[live] += delta[ev]
        infections[live] += ev < L
        live = live[(state[live, 1] + state[live, 2]).sum(axis=1) > 0]
    return infections


def linear_sde_covariance(drift, diffusion, times):
    """Covariance of dX = drift X dt + noise with instantaneous covariance ``diffusion(t)``, X(0)=0.

    Integrates the Lyapunov equation; returns (len(times), n, n).
    """
    n = drift.shape[0]

    def rhs(t, y):
        S = y.reshape(n, n)
        return (drift @ S + S @ drift.T + diffusion(t)).ravel()

    sol = integrate.solve_ivp(rhs, (times[0], times[-1]), np.zeros(n * n), t_eval=times,
                              method="DOP853", rtol=1e-11, atol=1e-13)
    return sol.y.T.reshape(len(times), n, n)
