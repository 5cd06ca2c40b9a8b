"""Model parameters, population state and the infection functional.

Internally every variant is run as a two-phase model over four *slots*
``(S, P1, P2, END)``: infection moves an individual from S into P1 (or
directly into P2 when there is no first phase), P1 ends after the first
duration, P2 after the second, and END is either an absorbing compartment or
routed straight back to S. ``Variant`` records how the slots map onto the
user-facing S, E, I, R compartments.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InputError, ValidationError
from .laws import DurationLaw, JointDurationLaw, equilibrium_law

COMPARTMENTS = ("S", "E", "I", "R")
VARIANTS = ("SEIR", "SIR", "SIS", "SIRS")


@dataclass(frozen=True)
class Variant:
    name: str
    has_phase1: bool
    recycle: bool  # END flows back to S
    infectious_slot: int
    slot_to_comp: tuple  # user compartment index held by each slot
    slot_rates: tuple  # migration-matrix name per slot, None when the slot stays empty

    @property
    def comp_to_slot(self) -> tuple:
        out = [None] * 4
        for s, c in enumerate(self.slot_to_comp):
            out[c] = s
        return tuple(out)


_VARIANTS = {
    "SEIR": Variant("SEIR", True, False, 2, (0, 1, 2, 3), ("nu_S", "nu_E", "nu_I", "nu_R")),
    "SIR": Variant("SIR", False, False, 2, (0, 1, 2, 3), ("nu_S", None, "nu_I", "nu_R")),
    "SIS": Variant("SIS", False, True, 2, (0, 1, 2, 3), ("nu_S", None, "nu_I", None)),
    # first phase is the infectious period, second the immune period
    "SIRS": Variant("SIRS", True, True, 1, (0, 2, 3, 1), ("nu_S", "nu_I", "nu_R", None)),
}


def get_variant(name: str) -> Variant:
    try:
        return _VARIANTS[name]
    except KeyError:
        raise InputError("UNKNOWN_VARIANT", f"variant must be one of {VARIANTS}") from None


def _as_array(x, dtype=float):
    try:
        return np.array(x, dtype=dtype)
    except (TypeError, ValueError):
        return np.array(np.nan)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Parameters of the multi-patch model.

    ``lam`` is either a length-L vector of infection rates or an
    ``(n_pieces, L)`` table used with ``lam_breaks`` (``n_pieces - 1``
    increasing times) as a piecewise-constant schedule. Migration matrices hold
    per-individual rates ``nu[from, to]``; their diagonals are ignored.
    """

    L: int
    lam: np.ndarray
    kappa: Optional[np.ndarray] = None
    gamma: float = 0.0
    nu_S: Optional[np.ndarray] = None
    nu_E: Optional[np.ndarray] = None
    nu_I: Optional[np.ndarray] = None
    nu_R: Optional[np.ndarray] = None
    variant: str = "SEIR"
    lam_breaks: tuple = ()
    ignored: tuple = ()

    def __post_init__(self):
        L = int(self.L) if np.isscalar(self.L) else self.L
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "lam", _as_array(self.lam))
        kap = np.eye(L) if self.kappa is None else _as_array(self.kappa)
        object.__setattr__(self, "kappa", kap)
        for name in ("nu_S", "nu_E", "nu_I", "nu_R"):
            val = getattr(self, name)
            object.__setattr__(self, name, np.zeros((L, L)) if val is None else _as_array(val))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "lam_breaks", tuple(float(b) for b in self.lam_breaks))

    @property
    def layout(self) -> Variant:
        return get_variant(self.variant)

    @property
    def lam_table(self) -> np.ndarray:
        return self.lam.reshape(-1, self.L)

    def lam_at(self, t: float) -> np.ndarray:
        """Infection rates in force at time ``t`` (right-continuous)."""
        k = int(np.searchsorted(self.lam_breaks, t, side="right"))
        return self.lam_table[k]

    def lam_max(self) -> np.ndarray:
        return self.lam_table.max(axis=0)

    def slot_rates(self) -> list[np.ndarray]:
        """Migration-rate matrix for each of the four slots (zero diagonal)."""
        out = []
        for name in self.layout.slot_rates:
            m = np.zeros((self.L, self.L)) if name is None else getattr(self, name).copy()
            np.fill_diagonal(m, 0.0)
            out.append(m)
        return out

    def nu_max(self) -> np.ndarray:
        """Entrywise maximum of the four migration matrices, zero diagonal."""
        m = np.maximum.reduce([self.nu_S, self.nu_E, self.nu_I, self.nu_R])
        m = m.copy()
        np.fill_diagonal(m, 0.0)
        return m


def validate_spec(spec: ModelSpec) -> ModelSpec:
    """Check every parameter constraint; return a normalized copy.

    Raises ``ValidationError`` listing all violations as
    ``(field, code, message)``. The returned spec has zeroed migration
    diagonals and records fields that the variant ignores.
    """
    v = []
    L = spec.L
    if not isinstance(L, (int, np.integer)) or L < 1:
        raise ValidationError([("L", "DIM_MISMATCH", "patch count must be an integer >= 1")])
    if spec.variant not in VARIANTS:
        v.append(("variant", "UNKNOWN_VARIANT", f"must be one of {VARIANTS}"))

    lam = spec.lam
    n_pieces = len(spec.lam_breaks) + 1
    if lam.size != n_pieces * L or (lam.ndim == 1 and n_pieces > 1) or lam.ndim > 2:
        v.append(("lambda", "DIM_MISMATCH", f"expected {L} rates per schedule piece, {n_pieces} pieces"))
    elif not np.all(np.isfinite(lam)) or np.any(lam < 0):
        v.append(("lambda", "NEGATIVE_RATE", "infection rates must be finite and >= 0"))
    br = np.asarray(spec.lam_breaks)
    if br.size and (np.any(np.diff(br) <= 0) or br[0] <= 0):
        v.append(("lambda_breaks", "SCHEDULE_ORDER", "breakpoints must be positive and increasing"))

    kap = spec.kappa
    if kap.shape != (L, L):
        v.append(("kappa", "DIM_MISMATCH", f"expected shape ({L}, {L}), got {kap.shape}"))
    else:
        if not np.all(np.isfinite(kap)) or np.any(kap < 0):
            v.append(("kappa", "NEGATIVE_RATE", "distance weights must be >= 0"))
        if not np.allclose(np.diag(kap), 1.0, rtol=0, atol=1e-12):
            v.append(("kappa", "KAPPA_DIAGONAL", "diagonal entries must equal 1"))

    if not np.isfinite(spec.gamma) or not 0.0 <= spec.gamma <= 1.0:
        v.append(("gamma", "GAMMA_RANGE", "mixing exponent must lie in [0, 1]"))

    clean = {}
    for name in ("nu_S", "nu_E", "nu_I", "nu_R"):
        m = getattr(spec, name)
        if m.shape != (L, L):
            v.append((name, "DIM_MISMATCH", f"expected shape ({L}, {L}), got {m.shape}"))
            continue
        m = m.copy()
        np.fill_diagonal(m, 0.0)
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            v.append((name, "NEGATIVE_RATE", "migration rates must be finite and >= 0"))
        clean[name] = m
    if v:
        raise ValidationError(v)

    layout = get_variant(spec.variant)
    ignored = []
    for name in ("nu_S", "nu_E", "nu_I", "nu_R"):
        if name not in layout.slot_rates:
            if np.any(clean[name] != 0):
                ignored.append(name)
            clean[name] = np.zeros((L, L))
    return replace(spec, lam=lam.astype(float), ignored=tuple(ignored), **clean)


@dataclass(frozen=True, eq=False)
class Laws:
    """The six duration laws.

    ``G``/``F`` are the first/second phase laws of newly infected individuals
    (exposed and infectious for SEIR; infectious and immune for SIRS; ``G`` is
    a zero duration for SIR and SIS). ``G0`` is the remaining first-phase
    duration of individuals already in that phase at time 0 and ``F0`` the
    remaining second-phase duration of those already in the second phase.
    ``joint_mode``/``rho`` couple the two periods of one individual.
    """

    G: DurationLaw
    F: DurationLaw
    G0: DurationLaw
    F0: DurationLaw
    joint_mode: str = "product"
    rho: float = 0.0

    @property
    def H(self) -> JointDurationLaw:
        return JointDurationLaw(self.G, self.F, self.joint_mode, self.rho)

    @property
    def H0(self) -> JointDurationLaw:
        return JointDurationLaw(self.G0, self.F, self.joint_mode, self.rho)

    @classmethod
    def with_equilibrium_initials(cls, G: DurationLaw, F: DurationLaw, joint_mode="product", rho=0.0) -> "Laws":
        """Use stationary-excess laws for the remaining initial durations."""
        G0 = G if _is_zero(G) else equilibrium_law(G)
        return cls(G, F, G0, equilibrium_law(F), joint_mode, rho)

    @classmethod
    def single_phase(cls, F: DurationLaw, F0: Optional[DurationLaw] = None) -> "Laws":
        """Laws for SIR/SIS: no first phase."""
        zero = DurationLaw.deterministic(0.0)
        return cls(zero, F, zero, equilibrium_law(F) if F0 is None else F0)


def _is_zero(law: DurationLaw) -> bool:
    return law.family == "deterministic" and law.params["value"] == 0.0


def check_laws(spec: ModelSpec, laws: Laws) -> None:
    if not spec.layout.has_phase1 and not (_is_zero(laws.G) and _is_zero(laws.G0)):
        raise InputError("BAD_LAWS", f"{spec.variant} has no exposed phase; G and G0 must be zero durations")


@dataclass
class PopulationState:
    """Integer counts ``counts[c, i]`` for compartment c in (S, E, I, R), patch i."""

    counts: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != 4:
            raise InputError("DIM_MISMATCH", "counts must have shape (4, L)")
        if np.any(self.counts < 0):
            raise InputError("NEGATIVE_COUNT", "compartment counts must be >= 0")

    @property
    def N(self) -> int:
        return int(self.counts.sum())

    @property
    def S(self):
        return self.counts[0]

    @property
    def E(self):
        return self.counts[1]

    @property
    def I(self):
        return self.counts[2]

    @property
    def R(self):
        return self.counts[3]


def infection_pressure(S, I, B, kappa, gamma, N=1.0):
    """``S_i * sum_l kappa[i,l] I_l / (N^(1-gamma) B_i^gamma)``, 0 where B_i = 0."""
    S = np.asarray(S, dtype=float)
    B = np.asarray(B, dtype=float)
    num = S * (np.asarray(kappa, dtype=float) @ np.asarray(I, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        den = N ** (1.0 - gamma) * B**gamma
        out = np.where(B > 0, num / den, 0.0)
    return out


def upsilon(state: PopulationState, spec: ModelSpec, t: float = 0.0) -> np.ndarray:
    """Per-patch infection functional before multiplication by the rates."""
    c = state.counts
    return infection_pressure(c[0], c[2], c.sum(axis=0), spec.kappa, spec.gamma, state.N)


def upsilon_bound(spec: ModelSpec, N: int = 1) -> float:
    """``max_i lam_i * sum_l kappa[i,l]``; bounds the infection rate per capita."""
    lam = spec.lam_max()
    if lam.size == 0:
        return 0.0
    return float(np.max(lam * spec.kappa.sum(axis=1)))


@dataclass(frozen=True, eq=False)
class InitialCondition:
    """Initial fractions ``fractions[c, i]`` over (S, E, I, R) x patches."""

    fractions: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.fractions, dtype=float)
        if f.ndim != 2 or f.shape[0] != 4:
            raise InputError("BAD_INIT", "initial fractions must have shape (4, L)")
        if np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
            raise InputError("BAD_INIT", f"initial fractions must be >= 0 and sum to 1 (sum={f.sum()})")
        object.__setattr__(self, "fractions", f)

    @classmethod
    def from_counts(cls, counts) -> "InitialCondition":
        c = np.asarray(counts, dtype=float)
        return cls(c / c.sum())

    def to_counts(self, N: int) -> np.ndarray:
        """Largest-remainder rounding so the counts sum to exactly N."""
        raw = self.fractions.ravel() * N
        base = np.floor(raw).astype(np.int64)
        short = int(N - base.sum())
        if short > 0:
            order = np.argsort(-(raw - base), kind="stable")
            base[order[:short]] += 1
        return base.reshape(self.fractions.shape)

    def slots(self, layout: Variant) -> np.ndarray:
        """Fractions rearranged into slot order."""
        return self.fractions[list(layout.slot_to_comp)]


def check_initial(spec: ModelSpec, init: np.ndarray) -> None:
    layout = spec.layout
    if init.shape != (4, spec.L):
        raise InputError("BAD_INIT", f"initial state must have shape (4, {spec.L})")
    unused = [c for s, c in enumerate(layout.slot_to_comp) if layout.slot_rates[s] is None and s > 0]
    if not layout.has_phase1:
        unused.append(1)
    for c in set(unused):
        if np.any(init[c] != 0):
            raise InputError("BAD_INIT", f"compartment {COMPARTMENTS[c]} must start empty for {spec.variant}")
