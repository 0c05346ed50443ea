"""Metropolis-within-Gibbs sampler: conjugate draws for every location and
variance parameter, random-walk Metropolis on log(pi_it) for prevalences."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import _kernels as K
from .model import (
    VARIANCE_NAMES,
    ObservedDataset,
    ParameterState,
    PriorConfig,
    inv_logit,
    logit,
)

INIT_MODES = ("prior-draw", "data-informed")


@dataclass(frozen=True)
class SamplerConfig:
    n_iter: int = 50_000
    burn_in: int = 10_000
    thin: int = 10
    proposal_sd: float = 0.4
    seed: int = 0
    n_chains: int = 4
    init_mode: str = "data-informed"

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValueError("n_iter must be positive")
        if not 0 <= self.burn_in < self.n_iter:
            raise ValueError(f"burn_in must satisfy 0 <= burn_in < n_iter, got {self.burn_in}")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not self.proposal_sd > 0:
            raise ValueError("proposal_sd must be positive")
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")

    @property
    def n_retained(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin

    def to_dict(self) -> dict:
        return asdict(self)


# -- state packing -----------------------------------------------------------


def _pack(state: ParameterState):
    scal = np.empty(K.N_SCALARS)
    scal[K.MU0] = state.mu0
    scal[K.THETA] = state.theta
    scal[K.S2_PI:] = state.variances()
    return (
        np.array(state.logit_pi, dtype=float),
        np.array(state.delta, dtype=float),
        np.array(state.gamma, dtype=float),
        np.array(state.phi, dtype=float),
        scal,
    )


def _unpack(x, delta, gamma, phi, scal) -> ParameterState:
    return ParameterState.from_logit(
        np.array(x),
        mu0=scal[K.MU0],
        theta=scal[K.THETA],
        delta=np.array(delta),
        gamma=np.array(gamma),
        phi=np.array(phi),
        **{name: scal[K.S2_PI + k] for k, name in enumerate(VARIANCE_NAMES)},
    )


def _log_n(state: ParameterState, data: ObservedDataset) -> np.ndarray:
    return K.log_sizes(np.ascontiguousarray(state.logit_pi), data.arrays.log_R)


# -- initialisation ------------------------------------------------------------


def _draw_invgamma(pair, rng) -> float:
    shape, scale = pair
    return scale / rng.gamma(shape)


def prior_draw(data: ObservedDataset, priors: PriorConfig, rng: np.random.Generator) -> ParameterState:
    """One draw of every parameter from the prior."""
    I, J, T1 = data.n_cities, data.n_subgroups, data.n_years
    var = {name: _draw_invgamma(getattr(priors, name), rng) for name in VARIANCE_NAMES}
    mu0 = rng.normal(0.0, math.sqrt(priors.mu0_prior_var))
    theta = rng.normal(0.0, math.sqrt(priors.theta_prior_var))
    delta = rng.normal(0.0, math.sqrt(var["sigma2_delta"]), size=I)
    gamma = rng.normal(0.0, math.sqrt(var["sigma2_gamma"]), size=J)
    phi = rng.normal(0.0, math.sqrt(var["sigma2_phi"]), size=T1 - 1)
    x = np.empty((I, T1))
    x[:, 0] = rng.normal(mu0, math.sqrt(var["sigma2_0"]), size=I)
    for t in range(1, T1):
        x[:, t] = x[:, t - 1] + phi[t - 1] + rng.normal(0.0, math.sqrt(var["sigma2_pi"]), size=I)
    return ParameterState.from_logit(x, mu0=mu0, theta=theta, delta=delta, gamma=gamma, phi=phi, **var)


def crude_prevalence(data: ObservedDataset) -> float | None:
    """Median of the raw per-record prevalence estimates, clamped to [1e-4, 0.5]."""
    R = data.reference_population
    raw = [math.exp(r.M) / R[r.i, r.t] for r in data.multiplier_records]
    raw += [r.N / R[r.i, r.t] for r in data.nsum_records]
    if not raw:
        return None
    return float(np.clip(np.median(raw), 1e-4, 0.5))


def init_state(
    data: ObservedDataset, priors: PriorConfig, config: SamplerConfig, rng: np.random.Generator
) -> ParameterState:
    """Starting point for a chain.

    ``data-informed`` puts every prevalence at the pooled crude estimate with
    zero biases and drifts; variances still come from the prior but are
    clipped to [0.01, 10] so the first sweeps start from a sane scale. With no
    records it falls back to a prior draw.
    """
    drawn = prior_draw(data, priors, rng)
    if config.init_mode == "prior-draw":
        x = np.clip(drawn.logit_pi, -30.0, 30.0)
        return drawn.evolve(logit_pi=x)
    p0 = crude_prevalence(data)
    if p0 is None:
        return drawn
    x = np.full((data.n_cities, data.n_years), logit(p0))
    var = {name: float(np.clip(getattr(drawn, name), 0.01, 10.0)) for name in VARIANCE_NAMES}
    return ParameterState.from_logit(
        x,
        mu0=logit(p0),
        theta=0.0,
        delta=np.zeros(data.n_cities),
        gamma=np.zeros(data.n_subgroups),
        phi=np.zeros(data.n_years - 1),
        **var,
    )


# -- full conditionals ---------------------------------------------------------


def mu0_conditional(pi0, sigma2_0: float, prior_var: float = 10.0) -> tuple[float, float]:
    x0 = np.ascontiguousarray(logit(np.atleast_1d(pi0)), dtype=float)
    return K.mu0_conditional(x0, sigma2_0, prior_var)


def theta_conditional(data: ObservedDataset, state: ParameterState, priors: PriorConfig) -> tuple[float, float]:
    a = data.arrays
    return K.theta_conditional(
        _log_n(state, data), a.mult_i, a.mult_j, a.mult_t, a.M, a.G, a.nsum_i, a.nsum_t, a.log_N,
        a.nsum_prec, state.delta, state.gamma, state.sigma2_eps, priors.theta_prior_var,
    )


def delta_conditional(i: int, data: ObservedDataset, state: ParameterState) -> tuple[float, float]:
    a = data.arrays
    m, v = K.delta_conditional(
        _log_n(state, data), a.mult_i, a.mult_j, a.mult_t, a.M, a.G, state.theta, state.gamma,
        state.sigma2_eps, state.sigma2_delta, data.n_cities,
    )
    return float(m[i]), float(v[i])


def gamma_conditional(j: int, data: ObservedDataset, state: ParameterState) -> tuple[float, float]:
    a = data.arrays
    m, v = K.gamma_conditional(
        _log_n(state, data), a.mult_i, a.mult_j, a.mult_t, a.M, a.G, state.theta, state.delta,
        state.sigma2_eps, state.sigma2_gamma, data.n_subgroups,
    )
    return float(m[j]), float(v[j])


def phi_conditional(t: int, state: ParameterState) -> tuple[float, float]:
    """Conditional of the drift into year ``t`` (1 <= t <= T)."""
    if not 1 <= t < state.pi.shape[1]:
        raise IndexError(f"phi is indexed 1..T, got t={t}")
    m, v = K.phi_conditional(np.ascontiguousarray(state.logit_pi), state.sigma2_pi, state.sigma2_phi)
    return float(m[t - 1]), float(v[t - 1])


def variance_conditional(
    name: str, state: ParameterState, priors: PriorConfig, data: ObservedDataset | None = None
) -> tuple[float, float]:
    """Inverse-gamma (shape, scale) of the full conditional of variance ``name``."""
    shape0, scale0 = getattr(priors, name)
    x = np.ascontiguousarray(state.logit_pi)
    if name == "sigma2_pi":
        return K.sigma2_pi_conditional(x, state.phi, shape0, scale0)
    if name == "sigma2_phi":
        return K.zero_mean_sigma2_conditional(state.phi, shape0, scale0)
    if name == "sigma2_gamma":
        return K.zero_mean_sigma2_conditional(state.gamma, shape0, scale0)
    if name == "sigma2_delta":
        return K.zero_mean_sigma2_conditional(state.delta, shape0, scale0)
    if name == "sigma2_0":
        return K.sigma2_0_conditional(np.ascontiguousarray(x[:, 0]), state.mu0, shape0, scale0)
    if name == "sigma2_eps":
        if data is None:
            raise ValueError("sigma2_eps conditional needs the dataset")
        a = data.arrays
        return K.sigma2_eps_conditional(
            _log_n(state, data), a.mult_i, a.mult_j, a.mult_t, a.M, a.G, state.theta, state.delta,
            state.gamma, shape0, scale0,
        )
    raise KeyError(name)


def _normal(mv, rng) -> float:
    m, v = mv
    return float(rng.normal(m, math.sqrt(v)))


def _invgamma(ab, rng) -> float:
    a, b = ab
    return float(b / rng.gamma(a))


def draw_mu0(pi0, sigma2_0: float, rng: np.random.Generator, prior_var: float = 10.0) -> float:
    return _normal(mu0_conditional(pi0, sigma2_0, prior_var), rng)


def draw_theta(data, state, priors, rng) -> float:
    return _normal(theta_conditional(data, state, priors), rng)


def draw_delta(i, data, state, priors, rng) -> float:
    return _normal(delta_conditional(i, data, state), rng)


def draw_gamma(j, data, state, priors, rng) -> float:
    return _normal(gamma_conditional(j, data, state), rng)


def draw_phi(t, state, priors, rng) -> float:
    return _normal(phi_conditional(t, state), rng)


def draw_sigma2_pi(state, priors, rng) -> float:
    return _invgamma(variance_conditional("sigma2_pi", state, priors), rng)


def draw_sigma2_phi(state, priors, rng) -> float:
    return _invgamma(variance_conditional("sigma2_phi", state, priors), rng)


def draw_sigma2_gamma(state, priors, rng) -> float:
    return _invgamma(variance_conditional("sigma2_gamma", state, priors), rng)


def draw_sigma2_delta(state, priors, rng) -> float:
    return _invgamma(variance_conditional("sigma2_delta", state, priors), rng)


def draw_sigma2_eps(data, state, priors, rng) -> float:
    return _invgamma(variance_conditional("sigma2_eps", state, priors, data), rng)


def draw_sigma2_0(state, priors, rng) -> float:
    return _invgamma(variance_conditional("sigma2_0", state, priors), rng)


# -- Metropolis step for pi ------------------------------------------------------


def _cell_args(i: int, t: int, data: ObservedDataset, state: ParameterState):
    a = data.arrays
    I, _, T1 = a.shape
    sg, sgc = K.cell_multiplier_stats(I, T1, a.mult_i, a.mult_j, a.mult_t, a.M, a.G, state.theta, state.delta, state.gamma)
    prec, target = K.cell_nsum_stats(I, T1, a.nsum_i, a.nsum_t, a.log_N, a.nsum_prec, state.theta)
    return (
        state.mu0, np.ascontiguousarray(state.phi), state.sigma2_pi, state.sigma2_0, state.sigma2_eps,
        a.log_R[i, t], sg[i, t], sgc[i, t], prec[i, t], target[i, t],
    )


def mh_update_pi(
    i: int, t: int, data: ObservedDataset, state: ParameterState, config: SamplerConfig, rng: np.random.Generator
) -> tuple[float, bool]:
    """One Metropolis update of pi_it with everything else held fixed."""
    x = np.array(state.logit_pi, dtype=float)
    accepted = K.mh_step(x, i, t, *_cell_args(i, t, data, state), config.proposal_sd, rng)
    return float(inv_logit(x[i, t])), bool(accepted)


def mh_chain(
    i: int, t: int, data: ObservedDataset, state: ParameterState, config: SamplerConfig, n: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, float]:
    """``n`` successive Metropolis updates of a single pi_it; returns the
    logit(pi_it) trajectory and the acceptance rate."""
    x = np.array(state.logit_pi, dtype=float)
    out, acc = K.mh_repeat_kernel(x, i, t, *_cell_args(i, t, data, state), config.proposal_sd, n, rng)
    return out, acc / n


def sweep(
    state: ParameterState, data: ObservedDataset, priors: PriorConfig, config: SamplerConfig,
    rng: np.random.Generator,
) -> ParameterState:
    """One full scan of the sampler starting from ``state``."""
    x, delta, gamma, phi, scal = _pack(state)
    accepts = np.zeros(x.shape, dtype=np.int64)
    K.sweep_kernel(*data.arrays.kernel_args(), x, delta, gamma, phi, scal, priors.as_array(), config.proposal_sd, rng, accepts)
    return _unpack(x, delta, gamma, phi, scal)


# -- chains ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PosteriorSamples:
    """Retained draws, shaped ``(chain, draw, ...)``."""

    logit_pi: np.ndarray
    mu0: np.ndarray
    theta: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    phi: np.ndarray
    variances: np.ndarray
    acceptance: np.ndarray
    reference_population: np.ndarray
    city_ids: tuple = ()
    subgroup_ids: tuple = ()
    years: tuple = ()
    config: SamplerConfig | None = None

    @property
    def n_chains(self) -> int:
        return self.theta.shape[0]

    @property
    def n_draws(self) -> int:
        return self.theta.shape[1]

    @property
    def pi(self) -> np.ndarray:
        return inv_logit(self.logit_pi)

    @property
    def sizes(self) -> np.ndarray:
        """Derived n_it = pi_it * R_it for every draw."""
        return self.pi * self.reference_population

    @property
    def log_sizes(self) -> np.ndarray:
        return -np.logaddexp(0.0, -self.logit_pi) + np.log(self.reference_population)

    def variance(self, name: str) -> np.ndarray:
        return self.variances[..., VARIANCE_NAMES.index(name)]

    def state(self, chain: int, draw: int) -> ParameterState:
        return ParameterState.from_logit(
            self.logit_pi[chain, draw],
            mu0=self.mu0[chain, draw],
            theta=self.theta[chain, draw],
            delta=self.delta[chain, draw],
            gamma=self.gamma[chain, draw],
            phi=self.phi[chain, draw],
            **{n: self.variances[chain, draw, k] for k, n in enumerate(VARIANCE_NAMES)},
        )

    def states(self) -> Iterator[ParameterState]:
        for c in range(self.n_chains):
            for s in range(self.n_draws):
                yield self.state(c, s)

    def scalar_draws(self) -> dict[str, np.ndarray]:
        """Every scalar parameter as a (chain, draw) array, keyed by display name."""
        out = {"mu0": self.mu0, "theta": self.theta}
        for i, c in enumerate(self.city_ids or range(self.delta.shape[2])):
            out[f"delta[{c}]"] = self.delta[:, :, i]
        for j, g in enumerate(self.subgroup_ids or range(self.gamma.shape[2])):
            out[f"gamma[{g}]"] = self.gamma[:, :, j]
        years = self.years or range(self.phi.shape[2] + 1)
        for t in range(self.phi.shape[2]):
            out[f"phi[{years[t + 1]}]"] = self.phi[:, :, t]
        for k, name in enumerate(VARIANCE_NAMES):
            out[name] = self.variances[:, :, k]
        return out


def chain_seeds(seed: int, n_chains: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n_chains)


def _run_one_chain(data: ObservedDataset, priors: PriorConfig, config: SamplerConfig, seed_seq) -> tuple:
    rng = np.random.default_rng(seed_seq)
    x, delta, gamma, phi, scal = _pack(init_state(data, priors, config, rng))
    S = config.n_retained
    I, T1 = x.shape
    out_x = np.empty((S, I, T1))
    out_delta = np.empty((S, delta.size))
    out_gamma = np.empty((S, gamma.size))
    out_phi = np.empty((S, phi.size))
    out_scal = np.empty((S, K.N_SCALARS))
    accepts = np.zeros((I, T1), dtype=np.int64)
    K.chain_kernel(
        *data.arrays.kernel_args(), x, delta, gamma, phi, scal, priors.as_array(), config.proposal_sd,
        config.n_iter, config.burn_in, config.thin, rng,
        out_x, out_delta, out_gamma, out_phi, out_scal, accepts,
    )
    return out_x, out_delta, out_gamma, out_phi, out_scal, accepts / (config.n_iter - config.burn_in)


def run_chain(data: ObservedDataset, priors: PriorConfig, config: SamplerConfig) -> PosteriorSamples:
    """Run ``config.n_chains`` independent chains; chain ``c`` uses the ``c``-th
    child of ``SeedSequence(config.seed)``."""
    if not isinstance(data, ObservedDataset):
        raise TypeError("data must be an ObservedDataset")
    if config.n_retained < 1:
        raise ValueError("configuration retains no draws: need (n_iter - burn_in) // thin >= 1")
    chains = [_run_one_chain(data, priors, config, s) for s in chain_seeds(config.seed, config.n_chains)]
    x, delta, gamma, phi, scal, acc = (np.stack(parts) for parts in zip(*chains))
    return PosteriorSamples(
        logit_pi=x,
        mu0=scal[:, :, K.MU0],
        theta=scal[:, :, K.THETA],
        delta=delta,
        gamma=gamma,
        phi=phi,
        variances=scal[:, :, K.S2_PI:],
        acceptance=acc,
        reference_population=np.array(data.reference_population),
        city_ids=data.city_ids,
        subgroup_ids=data.subgroup_ids,
        years=tuple(data.years),
        config=config,
    )


# -- convergence statistics ----------------------------------------------------------


def _split(chains: np.ndarray) -> np.ndarray:
    chains = np.atleast_2d(np.asarray(chains, dtype=float))
    half = chains.shape[1] // 2
    if half < 1:
        raise ValueError("need at least 2 draws per chain to split")
    return np.concatenate([chains[:, :half], chains[:, chains.shape[1] - half:]], axis=0)


def split_rhat(chains: np.ndarray) -> float:
    """Split potential scale reduction factor (Gelman et al., BDA3).

    ``chains`` has shape (n_chains, n_draws). Returns NaN when the
    within-chain variance is zero.
    """
    sp = _split(chains)
    n = sp.shape[1]
    W = sp.var(axis=1, ddof=1).mean()
    B = n * sp.mean(axis=1).var(ddof=1)
    if not W > 0:
        return math.nan
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    size = 2 ** int(math.ceil(math.log2(2 * n)))
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, n=size, axis=-1)
    return np.fft.irfft(f * np.conj(f), n=size, axis=-1)[..., :n] / n


def ess(chains: np.ndarray) -> float:
    """Effective sample size over split chains with Geyer's initial monotone
    sequence estimator."""
    sp = _split(chains)
    m, n = sp.shape
    acov = _autocov(sp)
    chain_var = acov[:, 0] * n / (n - 1.0)
    W = chain_var.mean()
    var_plus = W * (n - 1.0) / n
    if m > 1:
        var_plus += sp.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        return math.nan
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums, truncated at the first negative pair, made monotone
    total = 0.0
    prev = math.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
        t += 2
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / math.log10(m * n)) if m * n > 1 else tau
    return float(m * n / tau)


def mcse_mean(chains: np.ndarray) -> float:
    chains = np.asarray(chains, dtype=float)
    e = ess(chains)
    return float(chains.std(ddof=1) / math.sqrt(e))


# -- summaries -------------------------------------------------------------------------

QUANTILES = (0.025, 0.5, 0.975)


@dataclass(frozen=True)
class ParamSummary:
    mean: float
    sd: float
    q025: float
    q50: float
    q975: float
    rhat: float = math.nan
    ess: float = math.nan


def _summ(draws: np.ndarray) -> ParamSummary:
    flat = draws.reshape(-1)
    q = np.quantile(flat, QUANTILES)
    return ParamSummary(
        mean=float(flat.mean()),
        sd=float(flat.std(ddof=1)) if flat.size > 1 else 0.0,
        q025=float(q[0]),
        q50=float(q[1]),
        q975=float(q[2]),
        rhat=split_rhat(draws) if draws.shape[1] >= 4 else math.nan,
        ess=ess(draws) if draws.shape[1] >= 4 else math.nan,
    )


def _cell_stats(draws: np.ndarray) -> dict[str, np.ndarray]:
    """Per-cell stats for (chain, draw, I, T1) draws."""
    C, S = draws.shape[:2]
    flat = draws.reshape(C * S, *draws.shape[2:])
    q = np.quantile(flat, QUANTILES, axis=0)
    out = {
        "mean": flat.mean(axis=0),
        "sd": flat.std(axis=0, ddof=1),
        "q2.5": q[0],
        "q50": q[1],
        "q97.5": q[2],
    }
    rh = np.full(draws.shape[2:], math.nan)
    es = np.full(draws.shape[2:], math.nan)
    if S >= 4:
        for idx in np.ndindex(*draws.shape[2:]):
            cell = draws[(slice(None), slice(None)) + idx]
            rh[idx] = split_rhat(cell)
            es[idx] = ess(cell)
    out["rhat"] = rh
    out["ess"] = es
    return out


@dataclass(frozen=True, eq=False)
class PosteriorSummary:
    """Posterior means, sds, equal-tailed quantiles and convergence statistics."""

    params: dict
    prevalence: dict
    size: dict
    city_ids: tuple
    subgroup_ids: tuple
    years: tuple
    reference_population: np.ndarray
    acceptance: np.ndarray
    n_chains: int
    n_draws: int
    sigma_eps_mean: float = math.nan
    extra: dict = field(default_factory=dict)

    def point_state(self) -> ParameterState:
        """Parameter state at posterior means (prevalence at mean pi)."""
        p = self.params
        I, J = len(self.city_ids), len(self.subgroup_ids)
        years = self.years
        return ParameterState(
            pi=self.prevalence["mean"],
            mu0=p["mu0"].mean,
            theta=p["theta"].mean,
            delta=np.array([p[f"delta[{c}]"].mean for c in self.city_ids]) if I else np.zeros(0),
            gamma=np.array([p[f"gamma[{g}]"].mean for g in self.subgroup_ids]) if J else np.zeros(0),
            phi=np.array([p[f"phi[{y}]"].mean for y in years[1:]]),
            **{n: p[n].mean for n in VARIANCE_NAMES},
        )


def summarize(samples: PosteriorSamples) -> PosteriorSummary:
    if samples.n_draws * samples.n_chains < 2:
        raise ValueError("summaries need at least 2 retained draws")
    params = {name: _summ(d) for name, d in samples.scalar_draws().items()}
    return PosteriorSummary(
        params=params,
        prevalence=_cell_stats(samples.pi),
        size=_cell_stats(samples.sizes),
        city_ids=tuple(samples.city_ids),
        subgroup_ids=tuple(samples.subgroup_ids),
        years=tuple(samples.years),
        reference_population=samples.reference_population,
        acceptance=samples.acceptance.mean(axis=0),
        n_chains=samples.n_chains,
        n_draws=samples.n_draws,
        sigma_eps_mean=float(np.sqrt(samples.variance("sigma2_eps")).mean()),
    )
