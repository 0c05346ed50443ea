"""Synthetic datasets from the hierarchical model and the bias-violation studies.

Violation modes add a term to the log multiplier estimates that the fitted
model does not contain: ``year-bias`` draws one ``c_t ~ N(0, sigma_c^2)`` per
year, ``interaction`` one ``c_ij`` per city x subgroup pair.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd

from .model import (
    VARIANCE_NAMES,
    ModelArrays,
    MultiplierRecord,
    NsumRecord,
    ObservedDataset,
    ParameterState,
    PriorConfig,
    inv_logit,
    log_inv_logit,
    logit,
)
from .sampler import SamplerConfig, run_chain, summarize

log = logging.getLogger(__name__)

VIOLATION_MODES = ("none", "year-bias", "interaction")


@dataclass(frozen=True)
class SimulationConfig:
    """Generator settings. Year indices in ``nsum_years``/``multiplier_years`` are 0-based."""

    n_cities: int = 20
    n_years: int = 4
    n_subgroups: int = 4
    R_range: tuple[float, float] = (20_000.0, 400_000.0)
    mu0_mean: float = logit(0.1)
    mu0_sd: float = math.sqrt(0.5)
    variance_range: tuple[float, float] = (0.0, 1.0)
    sigma2_eps_range: tuple[float, float] = (200.0, 500.0)
    sigma_c: float = 0.0
    violation_mode: str = "none"
    nsum_years: tuple[int, ...] = (1,)
    multiplier_years: tuple[int, ...] = (0, 2, 3)
    G_range: tuple[int, int] = (100, 1000)
    P_range: tuple[float, float] = (0.05, 0.3)
    nsum_logvar_range: tuple[float, float] = (0.01, 0.05)
    theta_true: float | None = None
    seed: int = 0
    noiseless: bool = False
    integer_counts: bool = True
    first_year: int = 1

    def __post_init__(self):
        if min(self.n_cities, self.n_years, self.n_subgroups) < 1:
            raise ValueError("n_cities, n_years and n_subgroups must be positive")
        for name in ("R_range", "variance_range", "sigma2_eps_range", "G_range", "P_range", "nsum_logvar_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} must be ordered, got {(lo, hi)}")
        if self.R_range[0] <= 0 or self.G_range[0] < 1 or self.nsum_logvar_range[0] <= 0:
            raise ValueError("R, G and NSUM variance ranges must be positive")
        if self.variance_range[0] < 0 or self.sigma2_eps_range[0] < 0:
            raise ValueError("variance ranges must be non-negative")
        if not (0 < self.P_range[0] and self.P_range[1] < 1):
            raise ValueError("P_range must lie inside (0, 1)")
        if self.sigma_c < 0:
            raise ValueError("sigma_c must be non-negative")
        if self.violation_mode == "city-subgroup-interaction":
            object.__setattr__(self, "violation_mode", "interaction")
        if self.violation_mode not in VIOLATION_MODES:
            raise ValueError(f"violation_mode must be one of {VIOLATION_MODES}")
        for t in tuple(self.nsum_years) + tuple(self.multiplier_years):
            if not 0 <= t < self.n_years:
                raise ValueError(f"layout year index {t} outside 0..{self.n_years - 1}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SimulatedTruth:
    state: ParameterState
    violation: np.ndarray
    sizes: np.ndarray
    theta: float

    def to_dict(self) -> dict:
        s = self.state
        out = {
            "pi": s.pi.tolist(),
            "sizes": self.sizes.tolist(),
            "mu0": s.mu0,
            "theta": s.theta,
            "delta": s.delta.tolist(),
            "gamma": s.gamma.tolist(),
            "phi": s.phi.tolist(),
            "violation": self.violation.tolist(),
        }
        out.update({n: getattr(s, n) for n in VARIANCE_NAMES})
        return out


def _draw_truth(cfg: SimulationConfig, rng: np.random.Generator):
    I, J, T1 = cfg.n_cities, cfg.n_subgroups, cfg.n_years
    lo, hi = cfg.variance_range
    var = {n: rng.uniform(lo, hi) for n in VARIANCE_NAMES if n != "sigma2_eps"}
    var["sigma2_eps"] = rng.uniform(*cfg.sigma2_eps_range)
    # zero variances are allowed by the generator but not by ParameterState
    var = {n: max(v, 1e-12) for n, v in var.items()}
    mu0 = rng.normal(cfg.mu0_mean, cfg.mu0_sd)
    theta = rng.normal() if cfg.theta_true is None else cfg.theta_true
    delta = rng.normal(0.0, math.sqrt(var["sigma2_delta"]), size=I)
    gamma = rng.normal(0.0, math.sqrt(var["sigma2_gamma"]), size=J)
    phi = rng.normal(0.0, math.sqrt(var["sigma2_phi"]), size=T1 - 1)
    x = np.empty((I, T1))
    x[:, 0] = rng.normal(mu0, math.sqrt(var["sigma2_0"]), size=I)
    for t in range(1, T1):
        x[:, t] = x[:, t - 1] + phi[t - 1] + rng.normal(0.0, math.sqrt(var["sigma2_pi"]), size=I)
    state = ParameterState.from_logit(x, mu0=mu0, theta=theta, delta=delta, gamma=gamma, phi=phi, **var)
    R_city = rng.uniform(*cfg.R_range, size=I)
    R = np.repeat(R_city[:, None], T1, axis=1)
    return state, R


def simulate_dataset(cfg: SimulationConfig, seed: int | None = None) -> tuple[ObservedDataset, SimulatedTruth]:
    """Draw a ground-truth state and the estimates it generates.

    The base draws and the standardised violation terms come from separate
    child streams, so datasets with the same seed but different ``sigma_c``
    share everything except the violation magnitude.
    """
    seed = cfg.seed if seed is None else seed
    base_ss, viol_ss = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(base_ss)
    vrng = np.random.default_rng(viol_ss)
    I, J, T1 = cfg.n_cities, cfg.n_subgroups, cfg.n_years

    state, R = _draw_truth(cfg, rng)
    log_n = log_inv_logit(state.logit_pi) + np.log(R)

    if cfg.violation_mode == "year-bias":
        violation = cfg.sigma_c * vrng.standard_normal(T1)
        viol_at = lambda i, j, t: violation[t]  # noqa: E731
    elif cfg.violation_mode == "interaction":
        violation = cfg.sigma_c * vrng.standard_normal((I, J))
        viol_at = lambda i, j, t: violation[i, j]  # noqa: E731
    else:
        violation = np.zeros(0)
        viol_at = lambda i, j, t: 0.0  # noqa: E731

    noise = 0.0 if cfg.noiseless else 1.0
    mult = []
    for t in sorted(set(cfg.multiplier_years)):
        for i in range(I):
            for j in range(J):
                G = int(rng.integers(cfg.G_range[0], cfg.G_range[1] + 1))
                P = float(rng.uniform(*cfg.P_range))
                eps = noise * rng.normal(0.0, math.sqrt(state.sigma2_eps / G))
                M = log_n[i, t] + state.theta + viol_at(i, j, t) + state.delta[i] + state.gamma[j] + eps
                if cfg.integer_counts:
                    Y = max(1.0, float(round(P * math.exp(M))))
                    mult.append(MultiplierRecord(i, j, t, Y, P, G))
                else:
                    mult.append(MultiplierRecord.from_log_estimate(i, j, t, M, P, G))
    nsum = []
    for t in sorted(set(cfg.nsum_years)):
        for i in range(I):
            v = float(rng.uniform(*cfg.nsum_logvar_range))
            e = noise * rng.normal(0.0, math.sqrt(v))
            N = math.exp(log_n[i, t] - state.theta + e)
            nsum.append(NsumRecord(i, t, N, N * math.sqrt(v)))

    data = ObservedDataset(
        city_ids=[f"city{i + 1:02d}" for i in range(I)],
        subgroup_ids=[f"group{j + 1}" for j in range(J)],
        year_min=cfg.first_year,
        year_max=cfg.first_year + T1 - 1,
        reference_population=R,
        multiplier_records=mult,
        nsum_records=nsum,
    )
    truth = SimulatedTruth(state=state, violation=violation, sizes=state.pi * R, theta=state.theta)
    return data, truth


def simulate_observations(arrays: ModelArrays, state: ParameterState, rng: np.random.Generator) -> ModelArrays:
    """Fresh ``M`` and ``log N`` from the model at ``state``, keeping the
    record layout, ``G`` and the NSUM variances of ``arrays``."""
    log_n = log_inv_logit(state.logit_pi) + arrays.log_R
    M = (
        log_n[arrays.mult_i, arrays.mult_t]
        + state.theta
        + state.delta[arrays.mult_i]
        + state.gamma[arrays.mult_j]
        + rng.standard_normal(arrays.M.size) * np.sqrt(state.sigma2_eps / arrays.G)
    )
    log_N = log_n[arrays.nsum_i, arrays.nsum_t] - state.theta + rng.standard_normal(arrays.log_N.size) / np.sqrt(arrays.nsum_prec)
    return arrays.with_observations(M, log_N)


# -- studies ---------------------------------------------------------------------


class StudyError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetResult:
    """Fit outcome for one simulated dataset."""

    grid_index: int
    sigma_c: float
    dataset_index: int
    seed: int
    mean_error: float
    rmse: float
    theta_true: float
    theta_mean: float
    theta_q025: float
    theta_q975: float
    size_covered: int
    n_cells: int
    errors: tuple = field(repr=False, default=())

    @property
    def theta_covered(self) -> bool:
        return self.theta_q025 <= self.theta_true <= self.theta_q975


@dataclass(frozen=True, eq=False)
class StudySummary:
    """One row per sigma_c grid point (``table``) plus per-dataset results."""

    table: pd.DataFrame
    datasets: tuple
    mode: str

    def errors(self, grid_index: int) -> np.ndarray:
        return np.concatenate([np.asarray(d.errors) for d in self.datasets if d.grid_index == grid_index])

    def rmses(self, grid_index: int) -> np.ndarray:
        return np.array([d.rmse for d in self.datasets if d.grid_index == grid_index])

    def mean_errors(self, grid_index: int) -> np.ndarray:
        return np.array([d.mean_error for d in self.datasets if d.grid_index == grid_index])


def dataset_seed(base_seed: int, dataset_index: int) -> int:
    return int(np.random.SeedSequence([base_seed, dataset_index]).generate_state(1, np.uint64)[0])


def fit_and_score(
    cfg: SimulationConfig, seed: int, sampler_cfg: SamplerConfig, priors: PriorConfig,
    grid_index: int = 0, dataset_index: int = 0,
) -> DatasetResult:
    """Simulate one dataset, fit the standard model and score the size estimates
    (posterior mean of log10 size minus log10 true size per cell)."""
    data, truth = simulate_dataset(cfg, seed)
    try:
        samples = run_chain(data, priors, replace(sampler_cfg, seed=seed % 2**63))
    except Exception as exc:  # noqa: BLE001
        raise StudyError(f"fit failed for sigma_c={cfg.sigma_c} dataset {dataset_index} (seed={seed})") from exc
    sizes = samples.sizes.reshape(-1, *samples.sizes.shape[2:])
    err = np.log10(sizes).mean(axis=0) - np.log10(truth.sizes)
    lo, hi = np.quantile(sizes, [0.025, 0.975], axis=0)
    covered = int(np.sum((lo <= truth.sizes) & (truth.sizes <= hi)))
    th = samples.theta.reshape(-1)
    tq = np.quantile(th, [0.025, 0.975])
    return DatasetResult(
        grid_index=grid_index,
        sigma_c=cfg.sigma_c,
        dataset_index=dataset_index,
        seed=seed,
        mean_error=float(err.mean()),
        rmse=float(math.sqrt(np.mean(err**2))),
        theta_true=truth.theta,
        theta_mean=float(th.mean()),
        theta_q025=float(tq[0]),
        theta_q975=float(tq[1]),
        size_covered=covered,
        n_cells=int(err.size),
        errors=tuple(err.reshape(-1).tolist()),
    )


def _fit_task(args):
    return fit_and_score(*args)


def _summary_row(sigma_c: float, results: list[DatasetResult]) -> dict:
    errs = np.concatenate([np.asarray(r.errors) for r in results])
    means = np.array([r.mean_error for r in results])
    rmse = np.array([r.rmse for r in results])
    n = len(results)
    se = float(means.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    qe = np.quantile(errs, [0.025, 0.25, 0.75, 0.975])
    qm = np.quantile(means, [0.25, 0.75])
    qr = np.quantile(rmse, [0.025, 0.25, 0.75, 0.975])
    return {
        "sigma_c": sigma_c,
        "n_datasets": n,
        "mean_error": float(errs.mean()),
        "mean_error_mcse": se,
        "dataset_mean_error_q25": float(qm[0]),
        "dataset_mean_error_q75": float(qm[1]),
        "error_q2.5": float(qe[0]),
        "error_q25": float(qe[1]),
        "error_q75": float(qe[2]),
        "error_q97.5": float(qe[3]),
        "mean_rmse": float(rmse.mean()),
        "rmse_sd": float(rmse.std(ddof=1)) if n > 1 else math.nan,
        "rmse_q2.5": float(qr[0]),
        "rmse_q25": float(qr[1]),
        "rmse_q75": float(qr[2]),
        "rmse_q97.5": float(qr[3]),
        "size_coverage": float(sum(r.size_covered for r in results) / sum(r.n_cells for r in results)),
        "theta_coverage": float(np.mean([r.theta_covered for r in results])),
    }


def run_bias_study(
    cfg_base: SimulationConfig,
    sigma_c_grid,
    n_datasets: int,
    sampler_cfg: SamplerConfig,
    priors: PriorConfig | None = None,
    n_jobs: int = 1,
) -> StudySummary:
    """Fit ``n_datasets`` simulated datasets per ``sigma_c`` with the standard
    (violation-free) model and aggregate the log10 size errors.

    Dataset ``d`` uses the same seed at every grid point, so the grid is a
    paired comparison.
    """
    grid = [float(s) for s in sigma_c_grid]
    if not grid:
        raise ValueError("sigma_c grid is empty")
    if n_datasets < 1:
        raise ValueError("n_datasets must be >= 1")
    priors = priors or PriorConfig()
    tasks = []
    for g, sc in enumerate(grid):
        cfg = replace(cfg_base, sigma_c=sc)
        for d in range(n_datasets):
            tasks.append((cfg, dataset_seed(cfg_base.seed, d), sampler_cfg, priors, g, d))
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_fit_task, tasks))
    else:
        results = []
        for task in tasks:
            results.append(_fit_task(task))
            log.debug("sigma_c=%s dataset %d done", task[0].sigma_c, task[5])
    rows = [_summary_row(sc, [r for r in results if r.grid_index == g]) for g, sc in enumerate(grid)]
    return StudySummary(table=pd.DataFrame(rows), datasets=tuple(results), mode=cfg_base.violation_mode)
