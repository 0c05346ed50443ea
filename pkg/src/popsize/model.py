"""Domain types and log-density factors of the hierarchical size model.

Prevalences evolve as a logit-scale random walk with a common drift; the
multiplier and network scale-up (NSUM) estimates are log-normal around the
true size with method biases ``theta`` and ``-theta``.

All densities in this module are taken with respect to ``logit(pi)`` for the
prevalence block, which is the scale on which the prevalence prior is
specified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from functools import cached_property
from typing import Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

VARIANCE_NAMES = (
    "sigma2_pi",
    "sigma2_phi",
    "sigma2_gamma",
    "sigma2_delta",
    "sigma2_eps",
    "sigma2_0",
)


class DataError(ValueError):
    """Raised when an observed dataset violates its invariants."""


def logit(p):
    """log(p / (1 - p)); defined on the open unit interval."""
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("logit is only defined on (0, 1)")
    out = np.log(p) - np.log1p(-p)
    return float(out) if out.ndim == 0 else out


def inv_logit(x):
    x = np.asarray(x, dtype=float)
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return float(out) if out.ndim == 0 else out


def log_inv_logit(x):
    """log(inv_logit(x)) without overflow."""
    x = np.asarray(x, dtype=float)
    out = -np.logaddexp(0.0, -x)
    return float(out) if out.ndim == 0 else out


def norm_logpdf(x, mean, var):
    x = np.asarray(x, dtype=float)
    return -0.5 * (LOG_2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


def invgamma_logpdf(x, shape, scale):
    return shape * math.log(scale) - math.lgamma(shape) - (shape + 1.0) * math.log(x) - scale / x


@dataclass(frozen=True)
class MultiplierRecord:
    """One multiplier estimate: subgroup count ``Y`` over surveyed share ``P``."""

    i: int
    j: int
    t: int
    Y: float
    P: float
    G: float

    def __post_init__(self):
        if not (self.Y > 0 and math.isfinite(self.Y)):
            raise DataError(f"multiplier record ({self.i},{self.j},{self.t}): Y must be positive, got {self.Y}")
        if not 0.0 < self.P < 1.0:
            raise DataError(f"multiplier record ({self.i},{self.j},{self.t}): P must lie in (0,1), got {self.P}")
        if not self.G >= 1:
            raise DataError(f"multiplier record ({self.i},{self.j},{self.t}): G must be >= 1, got {self.G}")

    @property
    def M(self) -> float:
        return math.log(self.Y / self.P)

    @classmethod
    def from_log_estimate(cls, i: int, j: int, t: int, M: float, P: float, G: float) -> "MultiplierRecord":
        """Build a record whose ``log(Y/P)`` equals ``M`` (``Y`` left non-integral)."""
        return cls(i, j, t, P * math.exp(M), P, G)


@dataclass(frozen=True)
class NsumRecord:
    """One network scale-up estimate ``N`` with standard error ``S``."""

    i: int
    t: int
    N: float
    S: float

    def __post_init__(self):
        if not (self.N > 0 and math.isfinite(self.N)):
            raise DataError(f"NSUM record ({self.i},{self.t}): N must be positive, got {self.N}")
        if not (self.S > 0 and math.isfinite(self.S)):
            raise DataError(f"NSUM record ({self.i},{self.t}): S must be positive, got {self.S}")

    @property
    def v(self) -> float:
        """Known log-scale variance (delta method): S^2 / N^2."""
        return (self.S / self.N) ** 2

    @property
    def log_N(self) -> float:
        return math.log(self.N)


@dataclass(frozen=True, eq=False)
class ModelArrays:
    """Flat numeric view of an :class:`ObservedDataset` consumed by the sampler."""

    log_R: np.ndarray
    mult_i: np.ndarray
    mult_j: np.ndarray
    mult_t: np.ndarray
    M: np.ndarray
    G: np.ndarray
    nsum_i: np.ndarray
    nsum_t: np.ndarray
    log_N: np.ndarray
    nsum_prec: np.ndarray
    n_subgroups: int

    @property
    def shape(self) -> tuple[int, int, int]:
        I, T1 = self.log_R.shape
        return I, self.n_subgroups, T1

    def with_observations(self, M: np.ndarray, log_N: np.ndarray) -> "ModelArrays":
        return replace(self, M=np.ascontiguousarray(M, dtype=float), log_N=np.ascontiguousarray(log_N, dtype=float))

    def kernel_args(self) -> tuple:
        return (
            self.log_R,
            self.mult_i,
            self.mult_j,
            self.mult_t,
            self.M,
            self.G,
            self.nsum_i,
            self.nsum_t,
            self.log_N,
            self.nsum_prec,
            self.n_subgroups,
        )


@dataclass(frozen=True, eq=False)
class ObservedDataset:
    """Cities x subgroups x years panel of multiplier and NSUM estimates.

    ``reference_population`` has shape ``(I, T + 1)`` with years
    ``year_min..year_max`` mapped to indices ``0..T``. Years without any
    record are kept as latent interpolation years.
    """

    city_ids: tuple
    subgroup_ids: tuple
    year_min: int
    year_max: int
    reference_population: np.ndarray
    multiplier_records: tuple = ()
    nsum_records: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "city_ids", tuple(self.city_ids))
        object.__setattr__(self, "subgroup_ids", tuple(self.subgroup_ids))
        object.__setattr__(self, "multiplier_records", tuple(self.multiplier_records))
        object.__setattr__(self, "nsum_records", tuple(self.nsum_records))
        R = np.array(self.reference_population, dtype=float)
        R.setflags(write=False)
        object.__setattr__(self, "reference_population", R)
        self._validate()

    def _validate(self):
        I, J, T1 = self.n_cities, self.n_subgroups, self.n_years
        if self.year_max < self.year_min:
            raise DataError(f"year range [{self.year_min}, {self.year_max}] is empty")
        if len(set(self.city_ids)) != I or len(set(self.subgroup_ids)) != J:
            raise DataError("city and subgroup labels must be unique")
        if self.reference_population.shape != (I, T1):
            raise DataError(
                f"reference_population has shape {self.reference_population.shape}, expected {(I, T1)}"
            )
        R = self.reference_population
        if not np.all(np.isfinite(R) & (R > 0)):
            raise DataError("every reference population R_it must be positive and finite")
        seen = set()
        for rec in self.multiplier_records:
            if not (0 <= rec.i < I and 0 <= rec.j < J and 0 <= rec.t < T1):
                raise DataError(f"multiplier record index ({rec.i},{rec.j},{rec.t}) outside the panel")
            key = (rec.i, rec.j, rec.t)
            if key in seen:
                raise DataError(f"duplicate multiplier record for (city, subgroup, year) index {key}")
            seen.add(key)
        seen = set()
        for rec in self.nsum_records:
            if not (0 <= rec.i < I and 0 <= rec.t < T1):
                raise DataError(f"NSUM record index ({rec.i},{rec.t}) outside the panel")
            key = (rec.i, rec.t)
            if key in seen:
                raise DataError(f"duplicate NSUM record for (city, year) index {key}")
            seen.add(key)

    @property
    def n_cities(self) -> int:
        return len(self.city_ids)

    @property
    def n_subgroups(self) -> int:
        return len(self.subgroup_ids)

    @property
    def n_years(self) -> int:
        """Number of year slots, T + 1."""
        return self.year_max - self.year_min + 1

    @property
    def T(self) -> int:
        return self.year_max - self.year_min

    @property
    def years(self) -> tuple[int, ...]:
        return tuple(range(self.year_min, self.year_max + 1))

    @property
    def is_empty(self) -> bool:
        return not self.multiplier_records and not self.nsum_records

    @cached_property
    def arrays(self) -> ModelArrays:
        mult = self.multiplier_records
        nsum = self.nsum_records
        return ModelArrays(
            log_R=np.ascontiguousarray(np.log(self.reference_population)),
            mult_i=np.array([r.i for r in mult], dtype=np.int64),
            mult_j=np.array([r.j for r in mult], dtype=np.int64),
            mult_t=np.array([r.t for r in mult], dtype=np.int64),
            M=np.array([r.M for r in mult], dtype=float),
            G=np.array([r.G for r in mult], dtype=float),
            nsum_i=np.array([r.i for r in nsum], dtype=np.int64),
            nsum_t=np.array([r.t for r in nsum], dtype=np.int64),
            log_N=np.array([r.log_N for r in nsum], dtype=float),
            nsum_prec=np.array([1.0 / r.v for r in nsum], dtype=float),
            n_subgroups=self.n_subgroups,
        )

    def subset(
        self,
        cities: Sequence[int] | None = None,
        drop_subgroups: Sequence[int] = (),
        drop_nsum: bool = False,
    ) -> "ObservedDataset":
        """Dataset restricted to ``cities`` (re-indexed) without the dropped sources.

        Subgroup labels are kept even when dropped so parameter indices stay
        aligned with the full dataset.
        """
        keep = list(range(self.n_cities)) if cities is None else list(cities)
        remap = {old: new for new, old in enumerate(keep)}
        dropped = set(drop_subgroups)
        mult = [
            replace(r, i=remap[r.i])
            for r in self.multiplier_records
            if r.i in remap and r.j not in dropped
        ]
        nsum = [] if drop_nsum else [replace(r, i=remap[r.i]) for r in self.nsum_records if r.i in remap]
        return ObservedDataset(
            city_ids=[self.city_ids[i] for i in keep],
            subgroup_ids=self.subgroup_ids,
            year_min=self.year_min,
            year_max=self.year_max,
            reference_population=self.reference_population[keep],
            multiplier_records=mult,
            nsum_records=nsum,
        )


@dataclass(frozen=True)
class PriorConfig:
    """Prior hyperparameters. Inverse-gamma pairs are ``(shape, scale)``."""

    theta_prior_var: float = 1.0
    mu0_prior_var: float = 10.0
    sigma2_pi: tuple[float, float] = (0.5, 0.5)
    sigma2_phi: tuple[float, float] = (0.5, 0.5)
    sigma2_gamma: tuple[float, float] = (1.0, 0.001)
    sigma2_delta: tuple[float, float] = (1.0, 0.001)
    sigma2_eps: tuple[float, float] = (1.0, 0.001)
    sigma2_0: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if not (self.theta_prior_var > 0 and self.mu0_prior_var > 0):
            raise ValueError("prior variances must be positive")
        for name in VARIANCE_NAMES:
            pair = tuple(float(v) for v in getattr(self, name))
            if len(pair) != 2 or min(pair) <= 0:
                raise ValueError(f"{name}: inverse-gamma shape and scale must be positive, got {pair}")
            object.__setattr__(self, name, pair)

    def as_array(self) -> np.ndarray:
        """Packed layout: [theta_var, mu0_var, (shape, scale) x 6 in VARIANCE_NAMES order]."""
        vals = [self.theta_prior_var, self.mu0_prior_var]
        for name in VARIANCE_NAMES:
            vals.extend(getattr(self, name))
        return np.array(vals, dtype=float)

    def to_dict(self) -> dict:
        return {f.name: (list(getattr(self, f.name)) if isinstance(getattr(self, f.name), tuple) else getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown prior fields: {sorted(unknown)}")
        return cls(**{k: (tuple(v) if isinstance(v, (list, tuple)) else v) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class ParameterState:
    """One point of the posterior. ``pi`` has shape ``(I, T + 1)``; ``phi`` has length ``T``
    with ``phi[t - 1]`` the drift into year ``t``."""

    pi: np.ndarray
    mu0: float
    theta: float
    delta: np.ndarray
    gamma: np.ndarray
    phi: np.ndarray
    sigma2_pi: float
    sigma2_phi: float
    sigma2_gamma: float
    sigma2_delta: float
    sigma2_eps: float
    sigma2_0: float
    _logit_pi: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name in ("pi", "delta", "gamma", "phi"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.pi.ndim != 2:
            raise ValueError("pi must be an (I, T+1) matrix")
        if self.phi.shape != (self.pi.shape[1] - 1,):
            raise ValueError(f"phi must have length T={self.pi.shape[1] - 1}, got {self.phi.shape}")
        for name in VARIANCE_NAMES:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("mu0", "theta") + VARIANCE_NAMES:
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def from_logit(cls, logit_pi: np.ndarray, **kwargs) -> "ParameterState":
        """Construct from logit prevalences, keeping them exactly for the sampler."""
        x = np.array(logit_pi, dtype=float)
        return cls(pi=inv_logit(x).reshape(x.shape), _logit_pi=x, **kwargs)

    @property
    def logit_pi(self) -> np.ndarray:
        if self._logit_pi is not None:
            return self._logit_pi
        return np.log(self.pi) - np.log1p(-self.pi)

    @property
    def mu(self) -> float:
        """NSUM method bias, tied to the multiplier bias by mu = -theta."""
        return -self.theta

    def sizes(self, R: np.ndarray) -> np.ndarray:
        return self.pi * np.asarray(R)

    def log_sizes(self, R: np.ndarray) -> np.ndarray:
        return log_inv_logit(self.logit_pi) + np.log(np.asarray(R))

    def variances(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in VARIANCE_NAMES])

    def evolve(self, **changes) -> "ParameterState":
        """Copy with some fields replaced. Replacing ``pi`` drops the cached logits."""
        if "pi" in changes:
            changes.setdefault("_logit_pi", None)
        if "logit_pi" in changes:
            x = np.array(changes.pop("logit_pi"), dtype=float)
            changes["pi"] = inv_logit(x).reshape(x.shape)
            changes["_logit_pi"] = x
        return replace(self, **changes)


def multiplier_loglik(rec: MultiplierRecord, state: ParameterState, R_it: float) -> float:
    """Normal log-density of log(Y/P) around log(pi R) + theta + delta_i + gamma_j
    with variance sigma2_eps / G."""
    mean = math.log(state.pi[rec.i, rec.t] * R_it) + state.theta + state.delta[rec.i] + state.gamma[rec.j]
    return float(norm_logpdf(rec.M, mean, state.sigma2_eps / rec.G))


def nsum_loglik(rec: NsumRecord, state: ParameterState, R_it: float) -> float:
    """Normal log-density of log N around log(pi R) - theta with known variance S^2/N^2."""
    mean = math.log(state.pi[rec.i, rec.t] * R_it) - state.theta
    return float(norm_logpdf(rec.log_N, mean, rec.v))


def dynamic_logprior(state: ParameterState) -> float:
    """Initial-layer plus random-walk transition terms on the logit scale."""
    x = state.logit_pi
    lp = norm_logpdf(x[:, 0], state.mu0, state.sigma2_0).sum()
    if x.shape[1] > 1:
        resid = np.diff(x, axis=1) - state.phi[None, :]
        lp += norm_logpdf(resid, 0.0, state.sigma2_pi).sum()
    return float(lp)


def _loglik_arrays(state: ParameterState, arrays: ModelArrays) -> float:
    log_n = state.log_sizes(np.exp(arrays.log_R))
    ll = 0.0
    if arrays.M.size:
        mean = (
            log_n[arrays.mult_i, arrays.mult_t]
            + state.theta
            + state.delta[arrays.mult_i]
            + state.gamma[arrays.mult_j]
        )
        ll += norm_logpdf(arrays.M, mean, state.sigma2_eps / arrays.G).sum()
    if arrays.log_N.size:
        mean = log_n[arrays.nsum_i, arrays.nsum_t] - state.theta
        ll += norm_logpdf(arrays.log_N, mean, 1.0 / arrays.nsum_prec).sum()
    return float(ll)


def log_prior(state: ParameterState, priors: PriorConfig) -> float:
    lp = dynamic_logprior(state)
    lp += float(norm_logpdf(state.theta, 0.0, priors.theta_prior_var))
    lp += float(norm_logpdf(state.mu0, 0.0, priors.mu0_prior_var))
    lp += float(norm_logpdf(state.delta, 0.0, state.sigma2_delta).sum())
    lp += float(norm_logpdf(state.gamma, 0.0, state.sigma2_gamma).sum())
    lp += float(norm_logpdf(state.phi, 0.0, state.sigma2_phi).sum())
    for name in VARIANCE_NAMES:
        shape, scale = getattr(priors, name)
        lp += invgamma_logpdf(getattr(state, name), shape, scale)
    return lp


def log_joint_density(state: ParameterState, data: ObservedDataset, priors: PriorConfig) -> float:
    """Unnormalised log posterior (density w.r.t. logit(pi) for the prevalences).

    Returns ``-inf`` when any prevalence lies outside (0, 1).
    """
    if np.any((state.pi <= 0.0) | (state.pi >= 1.0)) and state._logit_pi is None:
        return -math.inf
    if not np.all(np.isfinite(state.logit_pi)):
        return -math.inf
    return _loglik_arrays(state, data.arrays) + log_prior(state, priors)
