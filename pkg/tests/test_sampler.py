from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from conftest import random_instance
from oracles import all_update_errors, logit_pi_conditional_cdf
from popsize.model import (
    VARIANCE_NAMES,
    MultiplierRecord,
    ObservedDataset,
    ParameterState,
    PriorConfig,
    log_joint_density,
    logit,
)
from popsize.sampler import (
    SamplerConfig,
    delta_conditional,
    draw_sigma2_delta,
    draw_sigma2_phi,
    draw_theta,
    ess,
    gamma_conditional,
    init_state,
    mh_chain,
    mh_update_pi,
    mu0_conditional,
    phi_conditional,
    run_chain,
    split_rhat,
    summarize,
    sweep,
    theta_conditional,
    variance_conditional,
)
from popsize.simulate import SimulationConfig, simulate_dataset


def _empty(I=1, J=1, T=1):
    return ObservedDataset(
        city_ids=tuple(f"c{i}" for i in range(I)), subgroup_ids=tuple(f"g{j}" for j in range(J)),
        year_min=0, year_max=T, reference_population=np.full((I, T + 1), 1e4),
    )


def _state(I=1, J=1, T=1, pi=0.1, **kw):
    base = dict(
        pi=np.full((I, T + 1), pi), mu0=-2.0, theta=0.0, delta=np.zeros(I), gamma=np.zeros(J),
        phi=np.zeros(T), sigma2_pi=1.0, sigma2_phi=1.0, sigma2_gamma=1.0, sigma2_delta=1.0,
        sigma2_eps=1.0, sigma2_0=1.0,
    )
    base.update(kw)
    return ParameterState(**base)


# -- closed-form examples --------------------------------------------------------------


def test_mu0_conditional_examples():
    assert mu0_conditional([0.5], 10.0) == pytest.approx((0.0, 5.0))
    m, v = mu0_conditional([0.3], 1e12)
    assert abs(m) < 1e-9 and v == pytest.approx(10.0)
    p = 1 / (1 + np.exp(-np.array([-2.0, -2.5, -1.5])))
    m, v = mu0_conditional(p, 0.5)
    assert v == pytest.approx(1 / (0.1 + 3 / 0.5))
    assert m == pytest.approx(-6.0 / (0.5 / 10 + 3))


def test_theta_conditional_prior_and_two_precision():
    assert theta_conditional(_empty(), _state(), PriorConfig()) == pytest.approx((0.0, 1.0))
    # residual M - log n - delta - gamma = 2 with G / sigma2_eps = 1
    R = 1e4
    d = ObservedDataset(
        city_ids=("c",), subgroup_ids=("g",), year_min=0, year_max=0, reference_population=np.array([[R]]),
        multiplier_records=(MultiplierRecord.from_log_estimate(0, 0, 0, math.log(0.1 * R) + 2.0, 0.1, 1.0),),
    )
    s = _state(T=0, phi=np.zeros(0))
    assert theta_conditional(d, s, PriorConfig()) == pytest.approx((1.0, 0.5))


def test_delta_gamma_prior_recovery_and_shrinkage():
    s = _state(I=2, J=2, sigma2_delta=0.7, sigma2_gamma=0.3)
    assert delta_conditional(1, _empty(I=2, J=2), s) == pytest.approx((0.0, 0.7))
    assert gamma_conditional(0, _empty(I=2, J=2), s) == pytest.approx((0.0, 0.3))
    R = 1e4
    rec = MultiplierRecord.from_log_estimate(0, 0, 0, math.log(0.1 * R) + 1.2, 0.1, 4.0)
    d = ObservedDataset(
        city_ids=("c",), subgroup_ids=("g",), year_min=0, year_max=0,
        reference_population=np.array([[R]]), multiplier_records=(rec,),
    )
    # sigma2_eps / G == sigma2_delta == sigma2_gamma -> half the residual
    s = _state(T=0, phi=np.zeros(0), sigma2_eps=2.0, sigma2_delta=0.5, sigma2_gamma=0.5)
    assert delta_conditional(0, d, s)[0] == pytest.approx(0.6)
    assert gamma_conditional(0, d, s)[0] == pytest.approx(0.6)


def test_phi_conditional_limits():
    s = _state(I=2, T=2)
    assert phi_conditional(1, s)[0] == pytest.approx(0.0)
    x = np.array([[0.0, 1.0, 1.5], [0.0, 3.0, 2.0]])
    s = ParameterState.from_logit(
        x, mu0=0.0, theta=0.0, delta=np.zeros(2), gamma=np.zeros(1), phi=np.zeros(2), sigma2_pi=0.8,
        sigma2_phi=1e12, sigma2_gamma=1.0, sigma2_delta=1.0, sigma2_eps=1.0, sigma2_0=1.0,
    )
    m, v = phi_conditional(1, s)
    assert m == pytest.approx(2.0) and v == pytest.approx(0.4)
    with pytest.raises(IndexError):
        phi_conditional(0, s)


def test_variance_conditional_examples():
    p = PriorConfig()
    s = _state(I=2, J=2, T=1)
    # logits all equal, phi zero -> zero transition residuals
    assert variance_conditional("sigma2_pi", s, p) == pytest.approx((0.5 + 2 / 2, 0.5))
    x = np.array([[0.0, 2.0]])
    s1 = ParameterState.from_logit(
        x, mu0=0.0, theta=0.0, delta=np.zeros(1), gamma=np.zeros(1), phi=np.zeros(1), sigma2_pi=1.0,
        sigma2_phi=1.0, sigma2_gamma=1.0, sigma2_delta=1.0, sigma2_eps=1.0, sigma2_0=1.0,
    )
    assert variance_conditional("sigma2_pi", s1, p) == pytest.approx((1.0, 2.5))
    assert variance_conditional("sigma2_gamma", s, p) == pytest.approx((2.0, 0.001))
    s2 = ParameterState.from_logit(
        np.array([[1.0], [-1.0]]), mu0=0.0, theta=0.0, delta=np.zeros(2), gamma=np.zeros(1), phi=np.zeros(0),
        sigma2_pi=1.0, sigma2_phi=1.0, sigma2_gamma=1.0, sigma2_delta=1.0, sigma2_eps=1.0, sigma2_0=1.0,
    )
    assert variance_conditional("sigma2_0", s2, p) == pytest.approx((1.5, 1.5))
    with pytest.raises(ValueError):
        variance_conditional("sigma2_eps", s, p)


# -- quadrature oracle -------------------------------------------------------------------


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_conditionals_match_quadrature(seed):
    rng = np.random.default_rng(seed)
    data, s = random_instance(rng)
    errs = all_update_errors(data, s, PriorConfig(), rng)
    for name, (e1, e2) in errs.items():
        assert e1 < 1e-5 and e2 < 1e-5, (name, e1, e2)


# -- draws vs analytic laws --------------------------------------------------------------


def test_inverse_gamma_draws_match_law():
    rng = np.random.default_rng(5)
    s = _state(I=3, T=2, phi=np.array([0.3, -0.2]), delta=np.array([0.1, -0.4, 0.2]))
    p = PriorConfig()
    for draw, name in ((draw_sigma2_phi, "sigma2_phi"), (draw_sigma2_delta, "sigma2_delta")):
        a, b = variance_conditional(name, s, p)
        x = np.array([draw(s, p, rng) for _ in range(20000)])
        assert stats.kstest(x, stats.invgamma(a, scale=b).cdf).pvalue > 1e-3


def test_theta_draws_match_law(rng):
    data, s = random_instance(rng, I=2, J=2, T=1)
    p = PriorConfig()
    m, v = theta_conditional(data, s, p)
    x = np.array([draw_theta(data, s, p, rng) for _ in range(20000)])
    assert stats.kstest(x, stats.norm(m, math.sqrt(v)).cdf).pvalue > 1e-3


# -- Metropolis step ---------------------------------------------------------------------


def test_mh_rejects_proposals_at_or_above_one():
    data = _empty(T=0)
    s = _state(T=0, phi=np.zeros(0), pi=1 - 1e-12)
    cfg = SamplerConfig(proposal_sd=50.0, n_iter=2, burn_in=0, thin=1)
    rng = np.random.default_rng(0)
    for _ in range(200):
        new, acc = mh_update_pi(0, 0, data, s, cfg, rng)
        assert 0 < new < 1
        if not acc:
            assert new == pytest.approx(s.pi[0, 0])


def test_mh_tiny_proposal_always_accepts(rng):
    data, s = random_instance(rng, I=1, J=1, T=1)
    cfg = SamplerConfig(proposal_sd=1e-9, n_iter=2, burn_in=0, thin=1)
    _, rate = mh_chain(0, 1, data, s, cfg, 2000, rng)
    assert rate > 0.999


def test_mh_stationary_law_small_sample():
    rng = np.random.default_rng(11)
    R = 5e4
    rec = MultiplierRecord(i=0, j=0, t=0, Y=400.0, P=0.2, G=2.0)
    data = ObservedDataset(
        city_ids=("c",), subgroup_ids=("g",), year_min=0, year_max=0,
        reference_population=np.array([[R]]), multiplier_records=(rec,),
    )
    s = _state(T=0, phi=np.zeros(0), pi=0.05, sigma2_eps=0.5, sigma2_0=0.6, mu0=-2.5)
    grid, cdf = logit_pi_conditional_cdf(data, s, PriorConfig(), 0, 0, n=2001)
    x, _ = mh_chain(0, 0, data, s, SamplerConfig(n_iter=2, burn_in=0, thin=1), 40000, rng)
    d = stats.kstest(x, lambda v: np.interp(v, grid, cdf)).statistic
    assert d < 0.04


# -- sweeps and chains -------------------------------------------------------------------


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_sweep_is_deterministic_and_stays_in_support(seed):
    rng0 = np.random.default_rng(seed)
    data, s = random_instance(rng0)
    cfg = SamplerConfig(n_iter=2, burn_in=0, thin=1)
    a = sweep(s, data, PriorConfig(), cfg, np.random.default_rng(seed))
    b = sweep(s, data, PriorConfig(), cfg, np.random.default_rng(seed))
    np.testing.assert_array_equal(a.logit_pi, b.logit_pi)
    np.testing.assert_array_equal(a.variances(), b.variances())
    assert math.isfinite(log_joint_density(a, data, PriorConfig()))
    assert np.all((a.pi > 0) & (a.pi < 1))


def test_init_state_modes():
    R = 1e4
    rec = MultiplierRecord.from_log_estimate(0, 0, 0, math.log(200.0), 0.1, 5.0)
    d = ObservedDataset(
        city_ids=("c",), subgroup_ids=("g",), year_min=0, year_max=1,
        reference_population=np.full((1, 2), R), multiplier_records=(rec,),
    )
    cfg = SamplerConfig(n_iter=2, burn_in=0, thin=1)
    s = init_state(d, PriorConfig(), cfg, np.random.default_rng(0))
    np.testing.assert_allclose(s.logit_pi, logit(0.02))
    assert s.theta == 0 and np.all(s.delta == 0)
    big = MultiplierRecord.from_log_estimate(0, 0, 0, math.log(0.9 * R), 0.1, 5.0)
    s = init_state(
        ObservedDataset(
            city_ids=("c",), subgroup_ids=("g",), year_min=0, year_max=1,
            reference_population=np.full((1, 2), R), multiplier_records=(big,),
        ),
        PriorConfig(), cfg, np.random.default_rng(0),
    )
    np.testing.assert_allclose(s.pi, 0.5)
    pcfg = SamplerConfig(n_iter=2, burn_in=0, thin=1, init_mode="prior-draw")
    a = init_state(d, PriorConfig(), pcfg, np.random.default_rng(3))
    b = init_state(d, PriorConfig(), pcfg, np.random.default_rng(3))
    np.testing.assert_array_equal(a.logit_pi, b.logit_pi)
    assert all(getattr(a, n) == getattr(b, n) for n in VARIANCE_NAMES)


@pytest.mark.parametrize(
    "kw", [dict(burn_in=10, n_iter=10), dict(thin=0), dict(proposal_sd=0.0), dict(n_chains=0), dict(init_mode="x")]
)
def test_sampler_config_validation(kw):
    with pytest.raises(ValueError):
        SamplerConfig(**kw)


@pytest.fixture(scope="module")
def small_fit():
    data, _ = simulate_dataset(SimulationConfig(n_cities=5, n_years=3, n_subgroups=2, multiplier_years=(0, 2)), seed=4)
    cfg = SamplerConfig(n_iter=3000, burn_in=1000, thin=7, n_chains=2, seed=9)
    return data, cfg, run_chain(data, PriorConfig(), cfg)


def test_run_chain_shapes_and_determinism(small_fit):
    data, cfg, s = small_fit
    assert s.logit_pi.shape == (2, (3000 - 1000) // 7, 5, 3)
    assert s.theta.shape == (2, 285)
    assert np.all((s.acceptance >= 0) & (s.acceptance <= 1))
    again = run_chain(data, PriorConfig(), cfg)
    np.testing.assert_array_equal(s.logit_pi, again.logit_pi)
    np.testing.assert_array_equal(s.variances, again.variances)
    assert not np.array_equal(s.theta[0], s.theta[1])


def test_run_chain_rejects_bad_input():
    with pytest.raises(TypeError):
        run_chain({"not": "data"}, PriorConfig(), SamplerConfig(n_iter=10, burn_in=0))
    with pytest.raises(ValueError):
        run_chain(_empty(), PriorConfig(), SamplerConfig(n_iter=10, burn_in=5, thin=10))


def test_acceptance_rates_are_healthy():
    data, _ = simulate_dataset(SimulationConfig(), seed=3)
    s = run_chain(data, PriorConfig(), SamplerConfig(n_iter=6000, burn_in=1000, n_chains=1))
    assert np.all((s.acceptance > 0.1) & (s.acceptance < 0.9))


# -- convergence statistics and summaries ------------------------------------------------


def test_split_rhat_behaviour():
    rng = np.random.default_rng(0)
    iid = rng.standard_normal((4, 2000))
    assert abs(split_rhat(iid) - 1) < 0.01
    shifted = iid + np.array([0, 0, 0, 3.0])[:, None]
    assert split_rhat(shifted) > 1.3
    # identical chains whose halves coincide: B = 0, R = sqrt((n - 1) / n)
    half = rng.standard_normal(50)
    chain = np.concatenate([half, half])
    assert split_rhat(np.stack([chain, chain])) == pytest.approx(math.sqrt(49 / 50), abs=1e-12)


def test_ess_iid_and_ar1():
    rng = np.random.default_rng(1)
    iid = rng.standard_normal((4, 5000))
    assert ess(iid) == pytest.approx(20000, rel=0.1)
    rho = 0.8
    x = np.zeros((4, 20000))
    e = rng.standard_normal(x.shape)
    for t in range(1, x.shape[1]):
        x[:, t] = rho * x[:, t - 1] + e[:, t]
    assert ess(x) == pytest.approx(80000 * (1 - rho) / (1 + rho), rel=0.15)


def test_summary_quantiles_and_constants(small_fit):
    _, _, s = small_fit
    summ = summarize(s)
    th = s.theta.reshape(-1)
    p = summ.params["theta"]
    assert p.q025 == pytest.approx(np.quantile(th, 0.025))
    assert p.q025 <= p.q50 <= p.q975
    assert summ.prevalence["mean"].shape == (5, 3)
    np.testing.assert_allclose(summ.size["mean"], (s.pi * s.reference_population).mean(axis=(0, 1)))
    assert np.all(summ.prevalence["q2.5"] <= summ.prevalence["q97.5"])


def test_type7_quantile_example():
    x = np.arange(1, 101, dtype=float)
    assert np.quantile(x, 0.025) == pytest.approx(3.475)


def test_empty_dataset_theta_is_prior():
    s = run_chain(_empty(I=2, J=1, T=1), PriorConfig(), SamplerConfig(n_iter=6000, burn_in=1000, thin=1, n_chains=1))
    th = s.theta.reshape(-1)
    assert stats.kstest(th, "norm").pvalue > 1e-3
