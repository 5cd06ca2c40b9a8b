from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from patchepi.errors import InputError, ValidationError
from patchepi.laws import DurationLaw, JointDurationLaw, equilibrium_law
from patchepi.model import (InitialCondition, Laws, ModelSpec, PopulationState, check_initial,
                            check_laws, infection_pressure, upsilon, upsilon_bound, validate_spec)


# ---------------------------------------------------------------- validation

def test_valid_two_patch_spec_accepted():
    spec = ModelSpec(L=2, lam=[1.0, 2.0], kappa=[[1, 0.3], [0.2, 1]], gamma=0.5,
                     nu_S=[[0, 0.1], [0.2, 0]])
    out = validate_spec(spec)
    assert out.L == 2
    assert np.all(np.diag(out.nu_S) == 0)


def test_kappa_diagonal_rejected():
    with pytest.raises(ValidationError) as exc:
        validate_spec(ModelSpec(L=2, lam=[1, 1], kappa=[[0.9, 0], [0, 1]]))
    assert "KAPPA_DIAGONAL" in exc.value.codes


def test_gamma_range_rejected():
    with pytest.raises(ValidationError) as exc:
        validate_spec(ModelSpec(L=1, lam=[1.0], gamma=1.2))
    assert "GAMMA_RANGE" in exc.value.codes


def test_negative_rate_and_dimension_errors_listed_together():
    spec = ModelSpec(L=2, lam=[-1.0, 1.0], kappa=np.eye(3))
    with pytest.raises(ValidationError) as exc:
        validate_spec(spec)
    assert {"NEGATIVE_RATE", "DIM_MISMATCH"} <= set(exc.value.codes)


def test_unknown_variant():
    with pytest.raises(InputError) as exc:
        validate_spec(ModelSpec(L=1, lam=[1.0], variant="SEIRS"))
    assert exc.value.code == "UNKNOWN_VARIANT"


def test_sir_flags_unused_exposed_migration():
    spec = validate_spec(ModelSpec(L=2, lam=[1, 1], variant="SIR", nu_E=[[0, 1], [1, 0]]))
    assert "nu_E" in spec.ignored
    assert np.all(spec.nu_E == 0)


def test_schedule_breaks_must_increase():
    with pytest.raises(ValidationError) as exc:
        validate_spec(ModelSpec(L=1, lam=[[1.0], [2.0], [0.5]], lam_breaks=(2.0, 1.0)))
    assert "SCHEDULE_ORDER" in exc.value.codes


def test_piecewise_rate_lookup():
    spec = validate_spec(ModelSpec(L=1, lam=[[1.0], [2.0]], lam_breaks=(3.0,)))
    assert spec.lam_at(2.999)[0] == 1.0
    assert spec.lam_at(3.0)[0] == 2.0
    assert spec.lam_max()[0] == 2.0


# ---------------------------------------------------------------- infection functional

def test_upsilon_single_patch_value():
    spec = validate_spec(ModelSpec(L=1, lam=[1.0], gamma=0.5))
    state = PopulationState(np.array([[300], [100], [200], [400]]))
    assert upsilon(state, spec)[0] == pytest.approx(60.0, rel=1e-12)


def test_upsilon_empty_patch_is_zero_for_gamma_one():
    spec = validate_spec(ModelSpec(L=2, lam=[1, 1], kappa=[[1, 0.5], [0, 1]], gamma=1.0))
    state = PopulationState(np.array([[0, 100], [0, 0], [0, 50], [0, 0]]))
    assert upsilon(state, spec)[0] == 0.0


def test_upsilon_without_infectives_is_zero():
    spec = validate_spec(ModelSpec(L=2, lam=[1, 1], kappa=[[1, 0.5], [0.2, 1]], gamma=0.3))
    state = PopulationState(np.array([[10, 20], [5, 0], [0, 0], [1, 1]]))
    assert np.all(upsilon(state, spec) == 0)


def test_upsilon_bound_values():
    spec = validate_spec(ModelSpec(L=2, lam=[2.0, 3.0], kappa=[[1, 0.5], [0.25, 1]]))
    assert upsilon_bound(spec) == pytest.approx(3.75)
    assert upsilon_bound(validate_spec(ModelSpec(L=2, lam=[2.0, 3.0]))) == pytest.approx(3.0)
    assert upsilon_bound(validate_spec(ModelSpec(L=2, lam=[0.0, 0.0]))) == 0.0


@settings(max_examples=60, deadline=None)
@given(counts=st.lists(st.integers(0, 50), min_size=8, max_size=8),
       k12=st.floats(0, 1), k21=st.floats(0, 1), gamma=st.floats(0, 1))
def test_pressure_within_bound(counts, k12, k21, gamma):
    c = np.array(counts, float).reshape(4, 2)
    N = c.sum()
    if N == 0:
        return
    kappa = np.array([[1, k12], [k21, 1]])
    B = c.sum(axis=0)
    ups = infection_pressure(c[0], c[2], B, kappa, gamma, N) / N
    assert np.all(ups >= 0)
    assert np.all(ups <= kappa.sum(axis=1) + 1e-12)


# ---------------------------------------------------------------- duration laws

LAWS = [
    DurationLaw.exponential(1.3),
    DurationLaw.gamma(2.0, 0.5),
    DurationLaw.lognormal(0.1, 0.6),
    DurationLaw.uniform(0.5, 2.0),
    DurationLaw.deterministic(1.5),
    DurationLaw.empirical([0.5, 1.0, 1.0, 3.0]),
]


@pytest.mark.parametrize("law", LAWS, ids=lambda l: l.family)
def test_cdf_basic_shape(law):
    ts = np.linspace(-1, 20, 500)
    c = np.asarray(law.cdf(ts))
    assert np.all(c[ts < 0] == 0)
    assert np.all(np.diff(c) >= -1e-15)
    assert c[-1] == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("law", LAWS, ids=lambda l: l.family)
def test_samples_match_cdf_within_dkw(law):
    n = 100_000
    x = np.sort(law.sample(np.random.default_rng(1), n))
    assert np.all(x >= 0)
    ecdf_hi = np.arange(1, n + 1) / n
    ecdf_lo = np.arange(0, n) / n
    c = np.asarray(law.cdf(x))
    dist = max(np.max(np.abs(ecdf_hi - c)), np.max(np.abs(ecdf_lo - c)))
    if law.is_atomic:
        # ties at atoms: compare only the right-continuous ecdf at distinct values
        vals, idx = np.unique(x, return_index=True)
        last = np.append(idx[1:], n) / n
        dist = np.max(np.abs(last - np.asarray(law.cdf(vals))))
    dkw = math.sqrt(math.log(2 / 0.01) / (2 * n))
    assert dist <= dkw


def test_deterministic_cdf_is_step():
    law = DurationLaw.deterministic(2.0)
    assert law.cdf(1.999) == 0.0
    assert law.cdf(2.0) == 1.0


@pytest.mark.parametrize("law", LAWS[:5], ids=lambda l: l.family)
def test_grid_masses_match_cdf(law):
    dt, K = 0.05, 200
    atom, cell = law.grid_masses(dt, K)
    total = np.cumsum(atom + cell)
    assert total == pytest.approx(np.asarray(law.cdf(np.arange(K) * dt)), abs=1e-12)


def test_atom_off_grid_rejected():
    with pytest.raises(InputError) as exc:
        DurationLaw.deterministic(0.123).grid_masses(0.05, 10)
    assert exc.value.code == "ATOM_OFF_GRID"


def test_bad_parameters_rejected():
    with pytest.raises(InputError):
        DurationLaw.gamma(-1.0, 1.0)
    with pytest.raises(InputError):
        DurationLaw("weibull", {"k": 1})


def test_equilibrium_laws():
    assert equilibrium_law(DurationLaw.exponential(2.0)).family == "exponential"
    u = equilibrium_law(DurationLaw.deterministic(3.0))
    assert u.family == "uniform" and u.params["high"] == 3.0
    # stationary excess mean is E[X^2] / (2 E[X])
    g = DurationLaw.gamma(2.0, 0.5)
    eq = equilibrium_law(g)
    assert eq.mean() == pytest.approx((2.0 * 0.25 + 1.0) / 2.0, rel=1e-6)
    x = eq.sample(np.random.default_rng(0), 100_000)
    assert stats.kstest(x, lambda t: np.asarray(eq.cdf(t))).pvalue > 0.001
    with pytest.raises(InputError):
        equilibrium_law(DurationLaw.empirical([1.0, 2.0]))


def test_product_joint_is_uncorrelated():
    j = JointDurationLaw(DurationLaw.gamma(2.0, 0.5), DurationLaw.lognormal(0, 0.5))
    eta, zeta = j.sample(np.random.default_rng(3), 100_000)
    assert abs(np.corrcoef(eta, zeta)[0, 1]) < 0.02


@pytest.mark.parametrize("mode,rho", [("comonotone", 0.0), ("gaussian-copula", 0.6)])
def test_dependent_joint_marginals(mode, rho):
    G, F = DurationLaw.gamma(2.0, 0.5), DurationLaw.exponential(1.0)
    j = JointDurationLaw(G, F, mode, rho)
    eta, zeta = j.sample(np.random.default_rng(4), 50_000)
    assert stats.kstest(eta, lambda t: np.asarray(G.cdf(t))).pvalue > 0.001
    assert stats.kstest(zeta, lambda t: np.asarray(F.cdf(t))).pvalue > 0.001
    assert np.corrcoef(eta, zeta)[0, 1] > 0.3


def test_conditional_cdf_integrates_to_marginal():
    G, F = DurationLaw.gamma(2.0, 0.5), DurationLaw.exponential(1.0)
    j = JointDurationLaw(G, F, "gaussian-copula", 0.5)
    u = G.sample(np.random.default_rng(5), 200_000)
    v = 0.8
    assert np.mean(j.conditional_cdf(v, u)) == pytest.approx(F.cdf(v), abs=5e-3)


# ---------------------------------------------------------------- laws bundle and initial state

def test_sir_needs_zero_first_phase():
    spec = validate_spec(ModelSpec(L=1, lam=[1.0], variant="SIR"))
    check_laws(spec, Laws.single_phase(DurationLaw.exponential(1.0)))
    with pytest.raises(InputError):
        check_laws(spec, Laws.with_equilibrium_initials(DurationLaw.exponential(1.0), DurationLaw.exponential(1.0)))


def test_initial_condition_counts_round_trip():
    fr = np.array([[0.333, 0.3], [0.1, 0.0], [0.167, 0.05], [0.0, 0.05]])
    init = InitialCondition(fr)
    counts = init.to_counts(997)
    assert counts.sum() == 997
    assert np.all(np.abs(counts / 997 - fr) < 1 / 997 + 1e-12)
    back = InitialCondition.from_counts(counts)
    assert back.fractions.sum() == pytest.approx(1.0)


def test_initial_fractions_must_sum_to_one():
    with pytest.raises(InputError):
        InitialCondition(np.full((4, 1), 0.3))


def test_sir_rejects_initial_exposed():
    spec = validate_spec(ModelSpec(L=1, lam=[1.0], variant="SIR"))
    with pytest.raises(InputError) as exc:
        check_initial(spec, np.array([[0.9], [0.05], [0.05], [0.0]]))
    assert exc.value.code == "BAD_INIT"


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=8, max_size=8), st.integers(1, 5000))
def test_largest_remainder_conserves_total(weights, N):
    w = np.array(weights)
    if w.sum() == 0:
        return
    init = InitialCondition((w / w.sum()).reshape(4, 2))
    c = init.to_counts(N)
    assert c.sum() == N and np.all(c >= 0)
