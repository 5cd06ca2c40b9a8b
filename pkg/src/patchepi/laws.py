"""Duration laws for the exposed and infectious periods.

A ``DurationLaw`` pairs a sampler with a cdf. A ``JointDurationLaw`` couples an
exposed-period law with an infectious-period law, either independently or
through a comonotone or Gaussian-copula dependence.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats

from .errors import InputError

FAMILIES = ("exponential", "gamma", "lognormal", "uniform", "deterministic", "empirical", "equilibrium")
JOINT_MODES = ("product", "comonotone", "gaussian-copula")

_REQUIRED = {
    "exponential": ("rate",),
    "gamma": ("shape", "scale"),
    "lognormal": ("mu", "sigma"),
    "uniform": ("low", "high"),
    "deterministic": ("value",),
    "empirical": ("values",),
    "equilibrium": ("base",),
}


@dataclass(frozen=True, eq=False)
class DurationLaw:
    """A nonnegative random duration.

    ``params`` holds the family parameters: ``rate`` (exponential), ``shape``
    and ``scale`` (gamma), ``mu`` and ``sigma`` of the log (lognormal),
    ``low`` and ``high`` (uniform), ``value`` (deterministic), ``values``
    (empirical sample) and ``base`` (equilibrium law of another law).
    """

    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError("UNKNOWN_FAMILY", f"unknown duration family {self.family!r}")
        missing = [k for k in _REQUIRED[self.family] if k not in self.params]
        extra = [k for k in self.params if k not in _REQUIRED[self.family]]
        if missing or extra:
            raise InputError(
                "BAD_LAW_PARAMS",
                f"{self.family} needs {list(_REQUIRED[self.family])}, got {sorted(self.params)}",
            )
        p = self.params
        bad = False
        if self.family == "exponential":
            bad = not p["rate"] > 0
        elif self.family == "gamma":
            bad = not (p["shape"] > 0 and p["scale"] > 0)
        elif self.family == "lognormal":
            bad = not p["sigma"] > 0
        elif self.family == "uniform":
            bad = not (0 <= p["low"] < p["high"])
        elif self.family == "deterministic":
            bad = not p["value"] >= 0
        elif self.family == "empirical":
            vals = np.sort(np.asarray(p["values"], dtype=float).ravel())
            bad = vals.size == 0 or bool(np.any(vals < 0)) or not np.all(np.isfinite(vals))
            object.__setattr__(self, "_sorted", vals)
        elif self.family == "equilibrium":
            base = p["base"]
            bad = not isinstance(base, DurationLaw) or base.family in ("empirical", "equilibrium")
            if not bad:
                bad = not base.mean() > 0
        if bad:
            raise InputError("BAD_LAW_PARAMS", f"invalid parameters for {self.family}: {p}")
        object.__setattr__(self, "_frozen", self._scipy())

    # constructors -----------------------------------------------------
    @classmethod
    def exponential(cls, rate: float) -> "DurationLaw":
        return cls("exponential", {"rate": float(rate)})

    @classmethod
    def gamma(cls, shape: float, scale: float) -> "DurationLaw":
        return cls("gamma", {"shape": float(shape), "scale": float(scale)})

    @classmethod
    def lognormal(cls, mu: float, sigma: float) -> "DurationLaw":
        return cls("lognormal", {"mu": float(mu), "sigma": float(sigma)})

    @classmethod
    def uniform(cls, low: float, high: float) -> "DurationLaw":
        return cls("uniform", {"low": float(low), "high": float(high)})

    @classmethod
    def deterministic(cls, value: float) -> "DurationLaw":
        return cls("deterministic", {"value": float(value)})

    @classmethod
    def empirical(cls, values) -> "DurationLaw":
        return cls("empirical", {"values": tuple(float(v) for v in np.ravel(values))})

    def _scipy(self):
        p = self.params
        if self.family == "exponential":
            return stats.expon(scale=1.0 / p["rate"])
        if self.family == "gamma":
            return stats.gamma(p["shape"], scale=p["scale"])
        if self.family == "lognormal":
            return stats.lognorm(p["sigma"], scale=np.exp(p["mu"]))
        if self.family == "uniform":
            return stats.uniform(loc=p["low"], scale=p["high"] - p["low"])
        return None

    # basic queries ----------------------------------------------------
    @property
    def is_atomic(self) -> bool:
        """True for purely atomic laws (deterministic, empirical)."""
        return self.family in ("deterministic", "empirical")

    def atoms(self) -> tuple[np.ndarray, np.ndarray]:
        """Atom locations and probabilities (empty for continuous laws)."""
        if self.family == "deterministic":
            return np.array([self.params["value"]]), np.array([1.0])
        if self.family == "empirical":
            locs, counts = np.unique(self._sorted, return_counts=True)
            return locs, counts / counts.sum()
        return np.zeros(0), np.zeros(0)

    def mean(self) -> float:
        p = self.params
        if self.family == "deterministic":
            return p["value"]
        if self.family == "empirical":
            return float(self._sorted.mean())
        if self.family == "equilibrium":
            base = p["base"]
            return base._frozen.moment(2) / (2 * base.mean()) if base._frozen is not None else base.params["value"] / 2
        return float(self._frozen.mean())

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        if self.family == "deterministic":
            out = (t >= self.params["value"]).astype(float)
        elif self.family == "empirical":
            out = np.searchsorted(self._sorted, t, side="right") / self._sorted.size
        elif self.family == "equilibrium":
            out = self._equilibrium_cdf(t)
        else:
            out = self._frozen.cdf(t)
        out = np.where(t < 0, 0.0, out)
        return float(out) if out.ndim == 0 else out

    def ppf(self, u):
        """Generalized inverse ``inf{t : cdf(t) >= u}``."""
        u = np.asarray(u, dtype=float)
        if self.family == "deterministic":
            out = np.full(u.shape, self.params["value"])
        elif self.family == "empirical":
            n = self._sorted.size
            idx = np.clip(np.ceil(u * n).astype(int) - 1, 0, n - 1)
            out = self._sorted[idx]
        elif self.family == "equilibrium":
            out = self._bisect_ppf(u)
        else:
            out = self._frozen.ppf(u)
        return float(out) if out.ndim == 0 else out

    def sample(self, rng: np.random.Generator, size=None):
        """Draw durations; returns a float when ``size`` is None."""
        p = self.params
        if self.family == "exponential":
            out = rng.exponential(1.0 / p["rate"], size)
        elif self.family == "gamma":
            out = rng.gamma(p["shape"], p["scale"], size)
        elif self.family == "lognormal":
            out = rng.lognormal(p["mu"], p["sigma"], size)
        elif self.family == "uniform":
            out = rng.uniform(p["low"], p["high"], size)
        elif self.family == "deterministic":
            out = np.full(() if size is None else size, p["value"])
        elif self.family == "empirical":
            out = rng.choice(self._sorted, size)
        else:
            # stationary excess = uniform fraction of a size-biased draw
            u = rng.random(size)
            out = u * self.params["base"]._size_biased_sample(rng, size)
        return float(out) if size is None else np.asarray(out, dtype=float)

    # equilibrium support ----------------------------------------------
    def _size_biased_sample(self, rng, size):
        p = self.params
        if self.family == "exponential":
            return rng.gamma(2.0, 1.0 / p["rate"], size)
        if self.family == "gamma":
            return rng.gamma(p["shape"] + 1.0, p["scale"], size)
        if self.family == "lognormal":
            return rng.lognormal(p["mu"] + p["sigma"] ** 2, p["sigma"], size)
        if self.family == "uniform":
            a, b = p["low"], p["high"]
            return np.sqrt(a * a + rng.random(size) * (b * b - a * a))
        return np.full(() if size is None else size, p["value"])

    def _size_biased_cdf(self, x):
        p = self.params
        if self.family == "exponential":
            return stats.gamma.cdf(x, 2.0, scale=1.0 / p["rate"])
        if self.family == "gamma":
            return stats.gamma.cdf(x, p["shape"] + 1.0, scale=p["scale"])
        if self.family == "lognormal":
            return stats.lognorm.cdf(x, p["sigma"], scale=np.exp(p["mu"] + p["sigma"] ** 2))
        if self.family == "uniform":
            a, b = p["low"], p["high"]
            return np.clip((x * x - a * a) / (b * b - a * a), 0.0, 1.0)
        return (x >= p["value"]).astype(float)

    def _equilibrium_cdf(self, x):
        base = self.params["base"]
        xp = np.maximum(x, 0.0)
        # int_0^x (1-F) = x(1-F(x)) + E[T; T<=x]
        tail = np.asarray(1.0 - base.cdf(xp), dtype=float)
        return np.clip(xp * tail / base.mean() + base._size_biased_cdf(xp), 0.0, 1.0)

    def _bisect_ppf(self, u):
        lo = np.zeros(u.shape)
        hi = np.full(u.shape, max(1.0, 2 * self.mean()))
        while np.any(self._equilibrium_cdf(hi) < u):
            hi = np.where(self._equilibrium_cdf(hi) < u, 2 * hi, hi)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            below = self._equilibrium_cdf(mid) < u
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return hi

    # grid discretization ----------------------------------------------
    def grid_masses(self, dt: float, K: int) -> tuple[np.ndarray, np.ndarray]:
        """Split the law over the grid ``t_k = k*dt``, ``k < K``.

        Returns ``(atom, cell)`` where ``atom[k]`` is the mass sitting exactly at
        ``t_k`` and ``cell[k]`` the continuous mass in ``(t_{k-1}, t_k]``
        (``cell[0] = 0``). Atoms must fall on grid points.
        """
        atom = np.zeros(K)
        cell = np.zeros(K)
        if self.is_atomic:
            locs, probs = self.atoms()
            pos = locs / dt
            idx = np.rint(pos).astype(np.int64)
            off = np.abs(pos - idx) > 1e-9 * np.maximum(1.0, np.abs(pos))
            if np.any(off):
                raise InputError(
                    "ATOM_OFF_GRID",
                    f"atoms {locs[off].tolist()} are not multiples of dt={dt}",
                )
            keep = idx < K
            np.add.at(atom, idx[keep], probs[keep])
        else:
            c = np.asarray(self.cdf(np.arange(K) * dt), dtype=float)
            cell[1:] = np.maximum(np.diff(c), 0.0)
        return atom, cell

    def __repr__(self) -> str:
        if self.family == "empirical":
            return f"DurationLaw(empirical, n={self._sorted.size})"
        return f"DurationLaw({self.family}, {self.params})"


def equilibrium_law(law: DurationLaw) -> DurationLaw:
    """Stationary-excess law with cdf ``int_0^x (1-F) / mean``.

    Used for the remaining durations of individuals already exposed or
    infectious at time 0. Exponential laws map to themselves and a fixed
    duration ``c`` maps to Uniform(0, c).
    """
    if law.family == "exponential":
        return law
    if law.family == "deterministic":
        if law.params["value"] <= 0:
            raise InputError("BAD_LAW_PARAMS", "equilibrium law of a zero duration is undefined")
        return DurationLaw.uniform(0.0, law.params["value"])
    if law.family in ("empirical", "equilibrium"):
        raise InputError("UNSUPPORTED_EQUILIBRIUM", f"no closed form for the {law.family} family")
    return DurationLaw("equilibrium", {"base": law})


@dataclass(frozen=True, eq=False)
class JointDurationLaw:
    """Joint law of (exposed period, infectious period).

    ``mode`` is ``product`` (independent), ``comonotone`` (both driven by one
    uniform) or ``gaussian-copula`` with correlation ``rho``.
    """

    exposed: DurationLaw
    infectious: DurationLaw
    mode: str = "product"
    rho: float = 0.0

    def __post_init__(self):
        if self.mode not in JOINT_MODES:
            raise InputError("UNKNOWN_JOINT_MODE", f"joint mode {self.mode!r}")
        if self.mode == "gaussian-copula" and not -1.0 < self.rho < 1.0:
            raise InputError("BAD_LAW_PARAMS", "copula correlation must lie in (-1, 1)")

    @property
    def has_conditional_cdf(self) -> bool:
        # comonotone coupling through an atomic exposed law has no usable density
        return self.mode != "comonotone" or not self.exposed.is_atomic

    def sample(self, rng: np.random.Generator, size: Optional[int] = None):
        n = 1 if size is None else size
        if self.mode == "product":
            eta = self.exposed.sample(rng, n)
            zeta = self.infectious.sample(rng, n)
        elif self.mode == "comonotone":
            u = rng.random(n)
            eta = np.asarray(self.exposed.ppf(u), dtype=float)
            zeta = np.asarray(self.infectious.ppf(u), dtype=float)
        else:
            z1 = rng.standard_normal(n)
            z2 = self.rho * z1 + np.sqrt(1 - self.rho**2) * rng.standard_normal(n)
            eta = np.asarray(self.exposed.ppf(stats.norm.cdf(z1)), dtype=float)
            zeta = np.asarray(self.infectious.ppf(stats.norm.cdf(z2)), dtype=float)
        eta = np.reshape(eta, n)
        zeta = np.reshape(zeta, n)
        if size is None:
            return float(eta[0]), float(zeta[0])
        return eta, zeta

    def conditional_cdf(self, v, u):
        """P(infectious period <= v | exposed period = u)."""
        v = np.asarray(v, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.mode == "product":
            return self.infectious.cdf(v)
        if self.mode == "comonotone":
            if self.exposed.is_atomic:
                raise InputError("UNSUPPORTED_JOINT", "comonotone coupling with an atomic exposed law")
            pair = self.infectious.ppf(self.exposed.cdf(u))
            return (v >= pair).astype(float)
        eps = 1e-15
        gu = np.clip(self.exposed.cdf(u), eps, 1 - eps)
        fv = np.clip(self.infectious.cdf(v), eps, 1 - eps)
        z = (stats.norm.ppf(fv) - self.rho * stats.norm.ppf(gu)) / np.sqrt(1 - self.rho**2)
        out = stats.norm.cdf(z)
        return np.where(v < 0, 0.0, out)
