"""Model checks: scaled residuals, temporal residual summaries, leave-one-city-out
prediction, posterior predictive checks and data-source contribution refits."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .model import ModelArrays, ObservedDataset, PriorConfig, log_inv_logit
from .sampler import PosteriorSamples, PosteriorSummary, SamplerConfig, run_chain

log = logging.getLogger(__name__)

NSUM_SOURCE = "NSUM"

# Reported for the Ukraine city panel; the raw data are unpublished, so these
# are carried for comparison only.
UKRAINE_REFERENCE = {
    "multiplier": {"correlation": 0.73, "coverage": 0.99},
    "nsum": {"correlation": 0.66, "coverage": 0.96},
}


# -- residuals ------------------------------------------------------------------


def _point_log_sizes(summary: PosteriorSummary) -> np.ndarray:
    return np.log(summary.prevalence["mean"] * summary.reference_population)


def multiplier_residuals(summary: PosteriorSummary, data: ObservedDataset) -> pd.DataFrame:
    """sqrt(G) * (log(Y/P) - fitted) / sigma_eps at posterior means.

    ``fitted`` is log(n) + theta + delta_i + gamma_j; dividing by the
    posterior mean of sigma_eps makes the reference law standard normal.
    """
    st = summary.point_state()
    log_n = _point_log_sizes(summary)
    rows = []
    for r in data.multiplier_records:
        fitted = log_n[r.i, r.t] + st.theta + st.delta[r.i] + st.gamma[r.j]
        raw = r.M - fitted
        rows.append(
            {
                "city": data.city_ids[r.i],
                "subgroup": data.subgroup_ids[r.j],
                "year": data.year_min + r.t,
                "i": r.i,
                "j": r.j,
                "t": r.t,
                "G": r.G,
                "R": data.reference_population[r.i, r.t],
                "observed": r.M,
                "fitted": fitted,
                "residual": raw,
                "scaled": math.sqrt(r.G) * raw / summary.sigma_eps_mean,
            }
        )
    return pd.DataFrame(rows, columns=["city", "subgroup", "year", "i", "j", "t", "G", "R", "observed", "fitted", "residual", "scaled"])


def nsum_residuals(summary: PosteriorSummary, data: ObservedDataset) -> pd.DataFrame:
    """(log N - log n - mu) / sqrt(v) at posterior means, with mu = -theta."""
    theta = summary.params["theta"].mean
    log_n = _point_log_sizes(summary)
    rows = []
    for r in data.nsum_records:
        fitted = log_n[r.i, r.t] - theta
        raw = r.log_N - fitted
        rows.append(
            {
                "city": data.city_ids[r.i],
                "year": data.year_min + r.t,
                "i": r.i,
                "t": r.t,
                "v": r.v,
                "observed": r.log_N,
                "fitted": fitted,
                "residual": raw,
                "scaled": raw / math.sqrt(r.v),
            }
        )
    return pd.DataFrame(rows, columns=["city", "year", "i", "t", "v", "observed", "fitted", "residual", "scaled"])


@dataclass(frozen=True, eq=False)
class YearResidualSummary:
    per_year: pd.DataFrame
    per_city_year: pd.DataFrame


def year_residual_summary(residuals: pd.DataFrame, column: str = "scaled") -> YearResidualSummary:
    """Mean residual per year and per (city, year)."""
    if residuals.empty:
        raise ValueError("no residuals to summarise")
    g = residuals.groupby("year")[column]
    per_year = pd.DataFrame(
        {"mean": g.mean(), "sd": g.std(ddof=1), "count": g.size()}
    ).reset_index()
    per_year["se"] = per_year["sd"] / np.sqrt(per_year["count"])
    per_cell = residuals.groupby(["city", "year"])[column].agg(["mean", "size"]).reset_index()
    per_cell = per_cell.rename(columns={"size": "count"})
    return YearResidualSummary(per_year=per_year, per_city_year=per_cell)


def year_trend(residuals: pd.DataFrame, column: str = "scaled") -> dict:
    """Least-squares slope of residuals against year."""
    if residuals["year"].nunique() < 2:
        return {"slope": math.nan, "stderr": math.nan, "pvalue": math.nan}
    fit = stats.linregress(residuals["year"].to_numpy(float), residuals[column].to_numpy(float))
    return {"slope": float(fit.slope), "stderr": float(fit.stderr), "pvalue": float(fit.pvalue)}


def normality_test(values, alpha: float = 0.01) -> dict:
    """Anderson-Darling test against the normal family."""
    values = np.asarray(values, dtype=float)
    if values.size < 3:
        return {"n": int(values.size), "statistic": math.nan, "critical_value": math.nan, "alpha": alpha, "normal": None}
    res = stats.anderson(values, dist="norm")
    levels = np.asarray(res.significance_level) / 100.0
    k = int(np.argmin(np.abs(levels - alpha)))
    crit = float(res.critical_values[k])
    return {
        "n": int(values.size),
        "statistic": float(res.statistic),
        "critical_value": crit,
        "alpha": float(levels[k]),
        "normal": bool(res.statistic < crit),
    }


def residual_report(summary: PosteriorSummary, data: ObservedDataset) -> dict:
    mult = multiplier_residuals(summary, data)
    nsum = nsum_residuals(summary, data)
    out = {"multiplier": mult, "nsum": nsum, "normality": {}, "trend": {}, "year_summary": {}}
    for name, df in (("multiplier", mult), ("nsum", nsum)):
        if df.empty:
            continue
        out["normality"][name] = normality_test(df["scaled"])
        out["trend"][name] = year_trend(df)
        out["year_summary"][name] = year_residual_summary(df)
    return out


# -- predictive machinery ----------------------------------------------------------


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0] * a.shape[1], *a.shape[2:])


def new_city_log_sizes(samples: PosteriorSamples, log_R: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Per retained draw, a fresh prevalence trajectory for an unseen city
    with reference population ``exp(log_R)`` (length T+1)."""
    mu0 = _flat(samples.mu0)
    phi = _flat(samples.phi)
    s2_0 = _flat(samples.variance("sigma2_0"))
    s2_pi = _flat(samples.variance("sigma2_pi"))
    S, T1 = mu0.shape[0], log_R.shape[0]
    x = np.empty((S, T1))
    x[:, 0] = mu0 + np.sqrt(s2_0) * rng.standard_normal(S)
    for t in range(1, T1):
        x[:, t] = x[:, t - 1] + phi[:, t - 1] + np.sqrt(s2_pi) * rng.standard_normal(S)
    return log_inv_logit(x) + log_R[None, :]


def _pred_row(method, city, subgroup, year, observed, draws) -> dict:
    lo, hi = np.quantile(draws, [0.025, 0.975])
    return {
        "method": method,
        "city": city,
        "subgroup": subgroup,
        "year": year,
        "observed": observed,
        "pred_mean": float(draws.mean()),
        "pred_q2.5": float(lo),
        "pred_q97.5": float(hi),
        "covered": bool(lo <= observed <= hi),
    }


def predict_held_out_city(
    samples: PosteriorSamples, data: ObservedDataset, city: int, rng: np.random.Generator
) -> list[dict]:
    """Predictive rows (log scale) for every record of ``city`` from a fit that
    excluded it: city bias redrawn, subgroup biases and theta kept."""
    log_R = np.log(data.reference_population[city])
    log_n = new_city_log_sizes(samples, log_R, rng)
    S = log_n.shape[0]
    theta = _flat(samples.theta)
    gamma = _flat(samples.gamma)
    s2_eps = _flat(samples.variance("sigma2_eps"))
    delta_new = np.sqrt(_flat(samples.variance("sigma2_delta"))) * rng.standard_normal(S)
    rows = []
    for r in data.multiplier_records:
        if r.i != city:
            continue
        draws = log_n[:, r.t] + theta + delta_new + gamma[:, r.j] + np.sqrt(s2_eps / r.G) * rng.standard_normal(S)
        rows.append(_pred_row("multiplier", data.city_ids[city], data.subgroup_ids[r.j], data.year_min + r.t, r.M, draws))
    for r in data.nsum_records:
        if r.i != city:
            continue
        draws = log_n[:, r.t] - theta + math.sqrt(r.v) * rng.standard_normal(S)
        rows.append(_pred_row("nsum", data.city_ids[city], "", data.year_min + r.t, r.log_N, draws))
    return rows


@dataclass(frozen=True, eq=False)
class LooResult:
    predictions: pd.DataFrame
    summary: dict
    reference: dict = field(default_factory=lambda: UKRAINE_REFERENCE)

    def to_dict(self) -> dict:
        return {"summary": self.summary, "reference": self.reference}


def _loo_task(args):
    data, priors, sampler_cfg, city = args
    keep = [i for i in range(data.n_cities) if i != city]
    reduced = data.subset(cities=keep)
    assert data.city_ids[city] not in reduced.city_ids
    samples = run_chain(reduced, priors, sampler_cfg)
    rng = np.random.default_rng([sampler_cfg.seed, city])
    return predict_held_out_city(samples, data, city, rng)


def loo_summary(predictions: pd.DataFrame) -> dict:
    out = {}
    for method, df in predictions.groupby("method"):
        corr = float(np.corrcoef(df["pred_mean"], df["observed"])[0, 1]) if len(df) > 1 else math.nan
        out[method] = {"n": int(len(df)), "coverage": float(df["covered"].mean()), "correlation": corr}
    return out


def loo_cv(
    data: ObservedDataset, priors: PriorConfig, sampler_cfg: SamplerConfig, n_jobs: int = 1,
    cities=None,
) -> LooResult:
    """Leave-one-city-out predictive coverage (95% intervals) and log-scale
    correlation between predictive means and observations, per method."""
    if data.n_cities < 2:
        raise ValueError("leave-one-city-out needs at least two cities")
    held = range(data.n_cities) if cities is None else cities
    tasks = [(data, priors, sampler_cfg, c) for c in held]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            chunks = list(pool.map(_loo_task, tasks))
    else:
        chunks = [_loo_task(t) for t in tasks]
    preds = pd.DataFrame([row for chunk in chunks for row in chunk])
    return LooResult(predictions=preds, summary=loo_summary(preds) if not preds.empty else {})


# -- posterior predictive checks ----------------------------------------------------


def tail_probability(observed: float, replicated) -> float:
    """Mid-p tail probability P(rep > obs) + P(rep = obs) / 2."""
    rep = np.asarray(replicated, dtype=float)
    return float(np.mean(rep > observed) + 0.5 * np.mean(rep == observed))


def replicate_observations(
    samples: PosteriorSamples, arrays: ModelArrays, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Per retained draw, replicated ``log(Y/P)`` and ``log N`` on the observed
    record layout; shapes (draws, records)."""
    log_n = _flat(samples.log_sizes)
    theta = _flat(samples.theta)[:, None]
    S = log_n.shape[0]
    M = (
        log_n[:, arrays.mult_i, arrays.mult_t]
        + theta
        + _flat(samples.delta)[:, arrays.mult_i]
        + _flat(samples.gamma)[:, arrays.mult_j]
        + np.sqrt(_flat(samples.variance("sigma2_eps"))[:, None] / arrays.G[None, :])
        * rng.standard_normal((S, arrays.M.size))
    )
    log_N = (
        log_n[:, arrays.nsum_i, arrays.nsum_t]
        - theta
        + rng.standard_normal((S, arrays.log_N.size)) / np.sqrt(arrays.nsum_prec)[None, :]
    )
    return M, log_N


@dataclass(frozen=True, eq=False)
class PpcResult:
    table: pd.DataFrame
    replications: pd.DataFrame


def posterior_predictive_check(samples: PosteriorSamples, data: ObservedDataset, seed: int = 0) -> PpcResult:
    """Replicated vs observed mean size estimate per subgroup and for NSUM."""
    arrays = data.arrays
    rng = np.random.default_rng(seed)
    M_rep, logN_rep = replicate_observations(samples, arrays, rng)
    stats_obs, stats_rep = {}, {}
    for j, label in enumerate(data.subgroup_ids):
        mask = arrays.mult_j == j
        if not mask.any():
            continue
        key = f"multiplier:{label}"
        stats_obs[key] = float(np.exp(arrays.M[mask]).mean())
        stats_rep[key] = np.exp(M_rep[:, mask]).mean(axis=1)
    if arrays.log_N.size:
        stats_obs[NSUM_SOURCE] = float(np.exp(arrays.log_N).mean())
        stats_rep[NSUM_SOURCE] = np.exp(logN_rep).mean(axis=1)
    rows = []
    for key, obs in stats_obs.items():
        rep = stats_rep[key]
        q = np.quantile(rep, [0.025, 0.5, 0.975])
        rows.append(
            {
                "statistic": key,
                "observed": obs,
                "rep_mean": float(rep.mean()),
                "rep_q2.5": float(q[0]),
                "rep_q50": float(q[1]),
                "rep_q97.5": float(q[2]),
                "tail_probability": tail_probability(obs, rep),
                "inside_95": bool(q[0] <= obs <= q[2]),
            }
        )
    reps = pd.DataFrame({k: v for k, v in stats_rep.items()})
    reps.insert(0, "draw", np.arange(len(reps)))
    return PpcResult(table=pd.DataFrame(rows), replications=reps)


# -- data-source contribution ---------------------------------------------------------


def available_sources(data: ObservedDataset) -> list[str]:
    present = sorted({r.j for r in data.multiplier_records})
    out = [data.subgroup_ids[j] for j in present]
    if data.nsum_records:
        out.append(NSUM_SOURCE)
    return out


def remove_source(data: ObservedDataset, source: str) -> ObservedDataset:
    if source == NSUM_SOURCE:
        return data.subset(drop_nsum=True)
    drop = [j for j, g in enumerate(data.subgroup_ids) if str(g) == str(source)]
    return data.subset(drop_subgroups=drop)


def _year_profile(samples: PosteriorSamples) -> tuple[np.ndarray, np.ndarray]:
    pi = _flat(samples.pi)
    mean = pi.mean(axis=0)
    lo, hi = np.quantile(pi, [0.025, 0.975], axis=0)
    return mean.mean(axis=0), (hi - lo).mean(axis=0)


@dataclass(frozen=True, eq=False)
class ContributionResult:
    table: pd.DataFrame
    warnings: tuple = ()


def source_contribution(
    data: ObservedDataset, priors: PriorConfig, sampler_cfg: SamplerConfig, sources=None
) -> ContributionResult:
    """Refit with each source removed (same seed) and report per-year cross-city
    mean posterior prevalence and mean 95% interval width."""
    sources = available_sources(data) if sources is None else list(sources)
    if len(available_sources(data)) < 2 and sources:
        log.warning("fewer than two sources present; removals may empty the dataset")
    runs = [("none", data)]
    warnings = []
    for src in sources:
        if src != NSUM_SOURCE and src not in {str(g) for g in data.subgroup_ids}:
            warnings.append(f"source {src!r} is not in the dataset; nothing removed")
        reduced = remove_source(data, src)
        if reduced.is_empty:
            warnings.append(f"removing {src!r} leaves no records; skipped")
            continue
        runs.append((src, reduced))
    rows = []
    for removed, d in runs:
        mean, width = _year_profile(run_chain(d, priors, sampler_cfg))
        for t, year in enumerate(data.years):
            if removed == NSUM_SOURCE:
                had = any(r.t == t for r in data.nsum_records)
            elif removed == "none":
                had = False
            else:
                had = any(r.t == t and str(data.subgroup_ids[r.j]) == removed for r in data.multiplier_records)
            rows.append(
                {
                    "removed": removed,
                    "year": year,
                    "mean_prevalence": float(mean[t]),
                    "mean_ci_width": float(width[t]),
                    "source_in_year": had,
                    "n_multiplier": len(d.multiplier_records),
                    "n_nsum": len(d.nsum_records),
                }
            )
    return ContributionResult(table=pd.DataFrame(rows), warnings=tuple(warnings))


# -- report ----------------------------------------------------------------------------


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, (np.floating,)):
        return _json_safe(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


@dataclass(eq=False)
class DiagnosticsReport:
    """Collected model checks; every section is optional."""

    residuals: dict | None = None
    loo: LooResult | None = None
    ppc: PpcResult | None = None
    contribution: ContributionResult | None = None

    @property
    def is_empty(self) -> bool:
        return self.residuals is None and self.loo is None and self.ppc is None and self.contribution is None

    def to_dict(self) -> dict:
        out = {}
        if self.residuals is not None:
            res = self.residuals
            out["residuals"] = {
                "counts": {"multiplier": int(len(res["multiplier"])), "nsum": int(len(res["nsum"]))},
                "normality": res["normality"],
                "trend": res["trend"],
                "year_means": {
                    k: v.per_year.to_dict(orient="records") for k, v in res["year_summary"].items()
                },
            }
        if self.loo is not None:
            out["loo"] = self.loo.to_dict()
        if self.ppc is not None:
            out["ppc"] = self.ppc.table.to_dict(orient="records")
        if self.contribution is not None:
            out["contribution"] = {
                "table": self.contribution.table.to_dict(orient="records"),
                "warnings": list(self.contribution.warnings),
            }
        return _json_safe(out)

    def tables(self) -> dict[str, pd.DataFrame]:
        out = {}
        if self.residuals is not None:
            out["residuals_multiplier"] = self.residuals["multiplier"]
            out["residuals_nsum"] = self.residuals["nsum"]
            for k, v in self.residuals["year_summary"].items():
                out[f"residual_year_means_{k}"] = v.per_year
                out[f"residual_city_year_means_{k}"] = v.per_city_year
        if self.loo is not None:
            out["loo_predictions"] = self.loo.predictions
        if self.ppc is not None:
            out["ppc"] = self.ppc.table
            out["ppc_replications"] = self.ppc.replications
        if self.contribution is not None:
            out["contribution"] = self.contribution.table
        return out
