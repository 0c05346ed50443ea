"""CSV/JSON input and output: dataset loading, run configuration and
deterministic result files."""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import platform
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from .model import DataError, MultiplierRecord, NsumRecord, ObservedDataset, PriorConfig
from .sampler import ParamSummary, PosteriorSummary, SamplerConfig
from .simulate import SimulationConfig, StudySummary

MULTIPLIER_COLUMNS = ("city", "subgroup", "year", "Y", "P", "G")
NSUM_COLUMNS = ("city", "year", "N", "S")
POPULATION_COLUMNS = ("city", "year", "R")
CELL_COLUMNS = ("city", "year", "mean", "sd", "q2.5", "q50", "q97.5")
BIAS_COLUMNS = ("param", "index", "mean", "sd", "q2.5", "q97.5")
PARAM_COLUMNS = ("param", "mean", "sd", "q2.5", "q50", "q97.5", "rhat", "ess")


class ParseError(DataError):
    """Input row that fails validation; names file, line and field."""

    def __init__(self, path, line: int | None, fieldname: str | None, message: str):
        self.path, self.line, self.field = str(path), line, fieldname
        where = self.path if line is None else f"{self.path}:{line}"
        if fieldname:
            where += f": field '{fieldname}'"
        super().__init__(f"{where}: {message}")


# -- reading ------------------------------------------------------------------------


def _read_rows(path, columns):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(path, None, None, f"cannot read file ({exc.strerror or exc})") from exc
    reader = csv.DictReader(_io.StringIO(text))
    header = reader.fieldnames
    if not header:
        raise ParseError(path, 1, None, "missing header row")
    header = [h.strip() for h in header]
    missing = [c for c in columns if c not in header]
    if missing:
        raise ParseError(path, 1, missing[0], f"missing column(s) {', '.join(missing)}")
    reader.fieldnames = header
    for row in reader:
        if not any((v or "").strip() for k, v in row.items() if k is not None):
            continue
        yield reader.line_num, {k: (row.get(k) or "").strip() for k in columns}


def _number(path, line, row, name, kind=float):
    raw = row[name]
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(path, line, name, f"not a number: {raw!r}") from None
    if not math.isfinite(value):
        raise ParseError(path, line, name, f"not finite: {raw!r}")
    if kind is int:
        if value != int(value):
            raise ParseError(path, line, name, f"not an integer: {raw!r}")
        return int(value)
    return value


def _positive(path, line, row, name):
    v = _number(path, line, row, name)
    if v <= 0:
        raise ParseError(path, line, name, f"must be positive, got {row[name]}")
    return v


def _label(path, line, row, name):
    v = row[name]
    if not v:
        raise ParseError(path, line, name, "empty value")
    return v


def load_dataset(multiplier_csv, nsum_csv=None, population_csv=None) -> ObservedDataset:
    """Load and validate the three input tables.

    Cities are those listed in the population table (sorted); subgroups are
    those seen in the multiplier table (sorted). The year range spans the
    observed records; every city needs R for every year in that range.
    """
    if population_csv is None:
        raise ParseError("population.csv", None, None, "population table is required")
    pop_rows = {}
    for line, row in _read_rows(population_csv, POPULATION_COLUMNS):
        city = _label(population_csv, line, row, "city")
        year = _number(population_csv, line, row, "year", int)
        R = _positive(population_csv, line, row, "R")
        if (city, year) in pop_rows:
            raise ParseError(population_csv, line, "year", f"duplicate population row for ({city}, {year})")
        pop_rows[(city, year)] = R
    cities = sorted({c for c, _ in pop_rows})
    if not cities:
        raise ParseError(population_csv, None, None, "no cities")

    mult = []
    if multiplier_csv is not None:
        seen = set()
        for line, row in _read_rows(multiplier_csv, MULTIPLIER_COLUMNS):
            city = _label(multiplier_csv, line, row, "city")
            if city not in cities:
                raise ParseError(multiplier_csv, line, "city", f"unknown city {city!r} (not in population table)")
            group = _label(multiplier_csv, line, row, "subgroup")
            year = _number(multiplier_csv, line, row, "year", int)
            Y = _positive(multiplier_csv, line, row, "Y")
            P = _number(multiplier_csv, line, row, "P")
            if not 0 < P < 1:
                raise ParseError(multiplier_csv, line, "P", f"must lie in (0, 1), got {row['P']}")
            G = _number(multiplier_csv, line, row, "G")
            if G < 1:
                raise ParseError(multiplier_csv, line, "G", f"must be at least 1, got {row['G']}")
            key = (city, group, year)
            if key in seen:
                raise ParseError(multiplier_csv, line, "year", f"duplicate record for {key}")
            seen.add(key)
            mult.append((line, city, group, year, Y, P, G))

    nsum = []
    if nsum_csv is not None:
        seen = set()
        for line, row in _read_rows(nsum_csv, NSUM_COLUMNS):
            city = _label(nsum_csv, line, row, "city")
            if city not in cities:
                raise ParseError(nsum_csv, line, "city", f"unknown city {city!r} (not in population table)")
            year = _number(nsum_csv, line, row, "year", int)
            N = _positive(nsum_csv, line, row, "N")
            S = _positive(nsum_csv, line, row, "S")
            if (city, year) in seen:
                raise ParseError(nsum_csv, line, "year", f"duplicate record for ({city}, {year})")
            seen.add((city, year))
            nsum.append((line, city, year, N, S))

    years = [r[3] for r in mult] + [r[2] for r in nsum]
    if not years:
        years = [y for _, y in pop_rows]
    y0, y1 = min(years), max(years)
    cidx = {c: i for i, c in enumerate(cities)}
    groups = sorted({r[2] for r in mult})
    gidx = {g: j for j, g in enumerate(groups)}

    R = np.empty((len(cities), y1 - y0 + 1))
    for c in cities:
        for y in range(y0, y1 + 1):
            if (c, y) not in pop_rows:
                raise ParseError(population_csv, None, "R", f"missing reference population for city {c!r}, year {y}")
            R[cidx[c], y - y0] = pop_rows[(c, y)]

    m_recs = tuple(
        MultiplierRecord(i=cidx[c], j=gidx[g], t=y - y0, Y=Y, P=P, G=G) for _, c, g, y, Y, P, G in mult
    )
    n_recs = tuple(NsumRecord(i=cidx[c], t=y - y0, N=N, S=S) for _, c, y, N, S in nsum)
    return ObservedDataset(
        city_ids=tuple(cities),
        subgroup_ids=tuple(groups),
        year_min=y0,
        year_max=y1,
        reference_population=R,
        multiplier_records=m_recs,
        nsum_records=n_recs,
    )


# -- writing ------------------------------------------------------------------------


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return "%.17g" % v
    return str(v)


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_csv(path, columns, rows) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r[c]) for c in columns])
    _atomic_write(Path(path), buf.getvalue())


def write_frame(path, df: pd.DataFrame) -> None:
    write_csv(path, list(df.columns), df.to_dict(orient="records"))


def write_json(path, obj) -> None:
    _atomic_write(Path(path), json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _cell_rows(summary: PosteriorSummary, stats: dict):
    for i, c in enumerate(summary.city_ids):
        for t, y in enumerate(summary.years):
            row = {"city": c, "year": y}
            for k in CELL_COLUMNS[2:]:
                row[k] = stats[k][i, t]
            yield row


def _split_name(name: str):
    if "[" in name:
        base, idx = name[:-1].split("[", 1)
        return base, idx
    return name, ""


def versions() -> dict:
    import numba
    import scipy

    from . import __version__

    return {
        "popsize": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "pandas": pd.__version__,
    }


def write_summary(summary: PosteriorSummary, report=None, out_dir=".", config: dict | None = None) -> list[str]:
    """Write the posterior summary and optional diagnostics to ``out_dir``.

    Files are rewritten atomically and contain no timestamps, so identical
    inputs give byte-identical output. Returns the written file names.
    """
    out = Path(out_dir)
    written = []
    write_csv(out / "prevalence.csv", CELL_COLUMNS, _cell_rows(summary, summary.prevalence))
    write_csv(out / "size.csv", CELL_COLUMNS, _cell_rows(summary, summary.size))
    written += ["prevalence.csv", "size.csv"]

    bias = []
    for name, p in summary.params.items():
        base, idx = _split_name(name)
        if base in ("theta", "delta", "gamma"):
            bias.append({"param": base, "index": idx, "mean": p.mean, "sd": p.sd, "q2.5": p.q025, "q97.5": p.q975})
    write_csv(out / "bias.csv", BIAS_COLUMNS, bias)
    params = [
        {"param": n, "mean": p.mean, "sd": p.sd, "q2.5": p.q025, "q50": p.q50, "q97.5": p.q975, "rhat": p.rhat, "ess": p.ess}
        for n, p in summary.params.items()
    ]
    write_csv(out / "parameters.csv", PARAM_COLUMNS, params)
    acc = [
        {"city": c, "year": y, "acceptance": summary.acceptance[i, t]}
        for i, c in enumerate(summary.city_ids)
        for t, y in enumerate(summary.years)
    ]
    write_csv(out / "acceptance.csv", ("city", "year", "acceptance"), acc)
    written += ["bias.csv", "parameters.csv", "acceptance.csv"]

    omitted = []
    if report is None or report.is_empty:
        omitted.append("diagnostics.json")
    else:
        write_json(out / "diagnostics.json", report.to_dict())
        written.append("diagnostics.json")
        for name, df in sorted(report.tables().items()):
            write_frame(out / "diagnostics" / f"{name}.csv", df)
            written.append(f"diagnostics/{name}.csv")

    manifest = {
        "config": config or {},
        "seed": (config or {}).get("sampler", {}).get("seed"),
        "n_chains": summary.n_chains,
        "n_draws_per_chain": summary.n_draws,
        "cities": list(summary.city_ids),
        "subgroups": list(summary.subgroup_ids),
        "years": list(summary.years),
        "files": sorted(written),
        "omitted": omitted,
        "versions": versions(),
    }
    write_json(out / "manifest.json", manifest)
    return sorted(written + ["manifest.json"])


def read_summary(out_dir) -> dict:
    """Parse files written by :func:`write_summary` back into arrays."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    cities = [str(c) for c in manifest["cities"]]
    years = list(manifest["years"])
    res = {"city_ids": tuple(cities), "years": tuple(years), "manifest": manifest}
    for name in ("prevalence", "size"):
        df = pd.read_csv(out / f"{name}.csv", dtype={"city": str}, float_precision="round_trip")
        stats = {}
        for k in CELL_COLUMNS[2:]:
            arr = np.full((len(cities), len(years)), np.nan)
            for c, y, v in zip(df["city"], df["year"], df[k]):
                arr[cities.index(c), years.index(int(y))] = v
            stats[k] = arr
        res[name] = stats
    df = pd.read_csv(out / "parameters.csv", float_precision="round_trip", keep_default_na=False, na_values=["nan"])
    res["params"] = {
        r["param"]: ParamSummary(
            mean=float(r["mean"]), sd=float(r["sd"]), q025=float(r["q2.5"]), q50=float(r["q50"]),
            q975=float(r["q97.5"]), rhat=float(r["rhat"]), ess=float(r["ess"]),
        )
        for r in df.to_dict(orient="records")
    }
    return res


def write_dataset(data: ObservedDataset, out_dir) -> list[str]:
    """Write a dataset in the three-table input format."""
    out = Path(out_dir)
    y0 = data.year_min
    write_csv(
        out / "multiplier.csv",
        MULTIPLIER_COLUMNS,
        (
            {"city": data.city_ids[r.i], "subgroup": data.subgroup_ids[r.j], "year": y0 + r.t, "Y": r.Y, "P": r.P, "G": r.G}
            for r in data.multiplier_records
        ),
    )
    write_csv(
        out / "nsum.csv",
        NSUM_COLUMNS,
        ({"city": data.city_ids[r.i], "year": y0 + r.t, "N": r.N, "S": r.S} for r in data.nsum_records),
    )
    write_csv(
        out / "population.csv",
        POPULATION_COLUMNS,
        (
            {"city": c, "year": y, "R": data.reference_population[i, t]}
            for i, c in enumerate(data.city_ids)
            for t, y in enumerate(data.years)
        ),
    )
    return ["multiplier.csv", "nsum.csv", "population.csv"]


def write_study(study: StudySummary, out_dir) -> list[str]:
    out = Path(out_dir)
    write_frame(out / "study.csv", study.table)
    rows = [
        {
            "sigma_c": r.sigma_c, "dataset": r.dataset_index, "seed": r.seed, "mean_error": r.mean_error,
            "rmse": r.rmse, "theta_true": r.theta_true, "theta_mean": r.theta_mean,
            "theta_covered": r.theta_covered, "size_covered": r.size_covered, "n_cells": r.n_cells,
        }
        for r in study.datasets
    ]
    write_csv(out / "study_datasets.csv", list(rows[0]) if rows else ["sigma_c"], rows)
    return ["study.csv", "study_datasets.csv"]


# -- run configuration ------------------------------------------------------------------


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    multiplier: str | None = None
    nsum: str | None = None
    population: str | None = None
    out: str = "out"
    priors: PriorConfig = field(default_factory=PriorConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    sigma_c: tuple = (0.0, 0.2, 0.4, 0.6, 0.8)
    n_datasets: int = 50
    mode: str = "year-bias"
    remove: tuple = ()
    jobs: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            if "priors" in d:
                d["priors"] = PriorConfig.from_dict(d["priors"])
            if "sampler" in d:
                d["sampler"] = SamplerConfig(**d["sampler"])
            if "simulation" in d:
                d["simulation"] = SimulationConfig(
                    **{k: tuple(v) if isinstance(v, list) else v for k, v in d["simulation"].items()}
                )
            for k in ("sigma_c", "remove"):
                if k in d:
                    d[k] = tuple(d[k])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror or exc})") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        try:
            return cls.from_dict(doc)
        except ConfigError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "multiplier": self.multiplier,
            "nsum": self.nsum,
            "population": self.population,
            "out": self.out,
            "priors": self.priors.to_dict(),
            "sampler": self.sampler.to_dict(),
            "simulation": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.simulation).items()},
            "sigma_c": list(self.sigma_c),
            "n_datasets": self.n_datasets,
            "mode": self.mode,
            "remove": list(self.remove),
            "jobs": self.jobs,
        }
