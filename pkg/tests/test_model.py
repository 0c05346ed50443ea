from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import random_instance
from popsize.model import (
    DataError,
    MultiplierRecord,
    NsumRecord,
    ObservedDataset,
    ParameterState,
    PriorConfig,
    dynamic_logprior,
    inv_logit,
    log_joint_density,
    log_prior,
    logit,
    multiplier_loglik,
    nsum_loglik,
)


def test_logit_known_values():
    assert logit(0.5) == 0.0
    assert inv_logit(0.0) == 0.5
    assert logit(0.75) == pytest.approx(math.log(3))


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_logit_rejects_out_of_range(p):
    with pytest.raises(ValueError):
        logit(p)


@given(st.floats(min_value=1e-12, max_value=1 - 1e-12))
def test_inv_logit_inverts_logit(p):
    assert inv_logit(logit(p)) == pytest.approx(p, rel=1e-12)


@given(st.floats(min_value=-700, max_value=700))
def test_logit_inverts_inv_logit_in_range(x):
    p = inv_logit(x)
    if 0 < p < 1 and abs(x) < 30:
        assert logit(p) == pytest.approx(x, abs=1e-9)


def test_multiplier_record_derived_quantity():
    r = MultiplierRecord(i=0, j=0, t=0, Y=200.0, P=0.1, G=50)
    assert r.M == pytest.approx(math.log(2000.0))


@pytest.mark.parametrize(
    "kw",
    [dict(Y=0.0, P=0.1, G=1), dict(Y=10.0, P=1.0, G=1), dict(Y=10.0, P=0.0, G=1), dict(Y=10.0, P=0.5, G=0)],
)
def test_multiplier_record_validation(kw):
    with pytest.raises(DataError):
        MultiplierRecord(i=0, j=0, t=0, **kw)


def test_nsum_record_variance():
    r = NsumRecord(i=0, t=0, N=1000.0, S=250.0)
    assert r.v == pytest.approx(0.0625)
    with pytest.raises(DataError):
        NsumRecord(i=0, t=0, N=-1.0, S=1.0)


def _one_cell_state(pi=0.1, theta=0.2, delta=0.1, gamma=-0.3, s2_eps=2.0):
    return ParameterState(
        pi=np.array([[pi]]), mu0=-2.0, theta=theta, delta=np.array([delta]), gamma=np.array([gamma]),
        phi=np.zeros(0), sigma2_pi=1.0, sigma2_phi=1.0, sigma2_gamma=1.0, sigma2_delta=1.0,
        sigma2_eps=s2_eps, sigma2_0=1.0,
    )


def test_multiplier_loglik_matches_scipy():
    st_ = _one_cell_state()
    rec = MultiplierRecord(i=0, j=0, t=0, Y=300.0, P=0.2, G=25)
    R = 10_000.0
    mean = math.log(0.1 * R) + 0.2 + 0.1 - 0.3
    expect = stats.norm.logpdf(rec.M, mean, math.sqrt(2.0 / 25))
    assert multiplier_loglik(rec, st_, R) == pytest.approx(expect, rel=1e-12)


def test_nsum_loglik_matches_scipy():
    st_ = _one_cell_state()
    rec = NsumRecord(i=0, t=0, N=900.0, S=180.0)
    R = 10_000.0
    expect = stats.norm.logpdf(math.log(900.0), math.log(1000.0) - 0.2, 0.2)
    assert nsum_loglik(rec, st_, R) == pytest.approx(expect, rel=1e-12)


def test_multiplier_loglik_peaks_at_zero_residual():
    st_ = _one_cell_state(theta=0.0, delta=0.0, gamma=0.0)
    R = 10_000.0
    # Y/P = pi R exactly
    best = multiplier_loglik(MultiplierRecord(i=0, j=0, t=0, Y=100.0, P=0.1, G=10), st_, R)
    off = multiplier_loglik(MultiplierRecord(i=0, j=0, t=0, Y=120.0, P=0.1, G=10), st_, R)
    assert best > off


def test_dynamic_prior_matches_scipy(rng):
    _, s = random_instance(rng, I=2, J=1, T=2)
    x = s.logit_pi
    expect = stats.norm.logpdf(x[:, 0], s.mu0, math.sqrt(s.sigma2_0)).sum()
    d = np.diff(x, axis=1) - s.phi[None, :]
    expect += stats.norm.logpdf(d, 0, math.sqrt(s.sigma2_pi)).sum()
    assert dynamic_logprior(s) == pytest.approx(expect, rel=1e-12)


def test_log_prior_matches_scipy(rng):
    _, s = random_instance(rng, I=2, J=2, T=1)
    p = PriorConfig()
    expect = dynamic_logprior(s)
    expect += stats.norm.logpdf(s.theta, 0, 1) + stats.norm.logpdf(s.mu0, 0, math.sqrt(10))
    expect += stats.norm.logpdf(s.delta, 0, math.sqrt(s.sigma2_delta)).sum()
    expect += stats.norm.logpdf(s.gamma, 0, math.sqrt(s.sigma2_gamma)).sum()
    expect += stats.norm.logpdf(s.phi, 0, math.sqrt(s.sigma2_phi)).sum()
    for name, (a, b) in [
        ("sigma2_pi", (0.5, 0.5)), ("sigma2_phi", (0.5, 0.5)), ("sigma2_0", (0.5, 0.5)),
        ("sigma2_gamma", (1.0, 0.001)), ("sigma2_delta", (1.0, 0.001)), ("sigma2_eps", (1.0, 0.001)),
    ]:
        expect += stats.invgamma.logpdf(getattr(s, name), a, scale=b)
    assert log_prior(s, p) == pytest.approx(expect, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_joint_factorises_into_likelihood_and_prior(seed):
    rng = np.random.default_rng(seed)
    data, s = random_instance(rng)
    R = data.reference_population
    ll = sum(multiplier_loglik(r, s, R[r.i, r.t]) for r in data.multiplier_records)
    ll += sum(nsum_loglik(r, s, R[r.i, r.t]) for r in data.nsum_records)
    total = log_joint_density(s, data, PriorConfig())
    assert total == pytest.approx(ll + log_prior(s, PriorConfig()), rel=1e-10, abs=1e-8)


def test_joint_is_minus_inf_outside_unit_interval(rng):
    data, s = random_instance(rng, I=1, J=1, T=1)
    for bad in (0.0, 1.0, 1.2):
        pi = np.array(s.pi)
        pi[0, 0] = bad
        assert log_joint_density(s.evolve(pi=pi), data, PriorConfig()) == -math.inf


def test_parameter_state_validation():
    with pytest.raises(ValueError):
        _one_cell_state(s2_eps=0.0)
    s = _one_cell_state()
    assert s.mu == -s.theta
    assert s.sizes(np.array([[1000.0]]))[0, 0] == pytest.approx(100.0)


def _dataset(**kw):
    base = dict(
        city_ids=("a", "b"), subgroup_ids=("g",), year_min=2000, year_max=2001,
        reference_population=np.full((2, 2), 1e4),
        multiplier_records=(MultiplierRecord(i=0, j=0, t=0, Y=10.0, P=0.1, G=5),),
        nsum_records=(NsumRecord(i=1, t=1, N=100.0, S=10.0),),
    )
    base.update(kw)
    return ObservedDataset(**base)


def test_dataset_shape_properties():
    d = _dataset()
    assert (d.n_cities, d.n_subgroups, d.n_years, d.T) == (2, 1, 2, 1)
    assert d.years == (2000, 2001)
    assert not d.is_empty


@pytest.mark.parametrize(
    "kw",
    [
        dict(reference_population=np.full((2, 3), 1e4)),
        dict(reference_population=np.array([[1e4, 0.0], [1e4, 1e4]])),
        dict(multiplier_records=(MultiplierRecord(i=5, j=0, t=0, Y=10.0, P=0.1, G=5),)),
        dict(multiplier_records=(MultiplierRecord(i=0, j=0, t=0, Y=10.0, P=0.1, G=5),) * 2),
        dict(nsum_records=(NsumRecord(i=1, t=4, N=100.0, S=10.0),)),
        dict(city_ids=("a", "a")),
    ],
)
def test_dataset_validation(kw):
    with pytest.raises(DataError):
        _dataset(**kw)


def test_subset_drops_cities_and_sources():
    d = _dataset()
    only_b = d.subset(cities=[1])
    assert only_b.city_ids == ("b",)
    assert len(only_b.multiplier_records) == 0 and len(only_b.nsum_records) == 1
    assert only_b.nsum_records[0].i == 0
    assert d.subset(drop_nsum=True).nsum_records == ()
    no_g = d.subset(drop_subgroups=[0])
    assert no_g.subgroup_ids == ("g",) and no_g.multiplier_records == ()


def test_prior_config_round_trip():
    p = PriorConfig(theta_prior_var=2.0, sigma2_eps=(3.0, 0.5))
    assert PriorConfig.from_dict(p.to_dict()) == p
    assert p.as_array().shape == (14,)
    with pytest.raises(ValueError):
        PriorConfig.from_dict({"nope": 1})
