"""Command-line interface: ``popsize <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .diagnostics import (
    DiagnosticsReport,
    loo_cv,
    posterior_predictive_check,
    residual_report,
    source_contribution,
)
from .io import (
    ConfigError,
    RunConfig,
    load_dataset,
    write_csv,
    write_dataset,
    write_frame,
    write_json,
    write_study,
    write_summary,
)
from .model import DataError
from .sampler import run_chain, summarize
from .simulate import VIOLATION_MODES, run_bias_study, simulate_dataset

log = logging.getLogger("popsize")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

COMMANDS = ("fit", "simulate", "study", "loo", "ppc", "contribution", "validate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration; flags override it")
    common.add_argument("--multiplier", help="multiplier.csv (city,subgroup,year,Y,P,G)")
    common.add_argument("--nsum", help="nsum.csv (city,year,N,S)")
    common.add_argument("--population", help="population.csv (city,year,R)")
    common.add_argument("--data-dir", help="directory holding the three CSVs")
    common.add_argument("--seed", type=int)
    common.add_argument("--iters", type=int, help="sweeps per chain including burn-in")
    common.add_argument("--burn-in", type=int)
    common.add_argument("--thin", type=int)
    common.add_argument("--chains", type=int)
    common.add_argument("--proposal-sd", type=float)
    common.add_argument("--out", help="output directory")
    common.add_argument("--sigma-c", type=_floats, help="comma-separated sigma_c value(s)")
    common.add_argument("--datasets", type=int, help="datasets per grid point")
    common.add_argument("--mode", choices=[m for m in VIOLATION_MODES if m != "none"])
    common.add_argument("--remove", action="append", help="source to remove (repeatable)")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="popsize", description="Bayesian population size estimation from multiplier and NSUM data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "fit": "fit the model and write posterior summaries",
        "simulate": "write one synthetic dataset and its true parameters",
        "study": "bias-violation simulation study over a sigma_c grid",
        "loo": "leave-one-city-out cross-validation",
        "ppc": "posterior predictive checks",
        "contribution": "refit with data sources removed",
        "validate": "check input files only",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if args.data_dir:
        d = Path(args.data_dir)
        cfg = replace(cfg, multiplier=str(d / "multiplier.csv"), population=str(d / "population.csv"))
        if (d / "nsum.csv").exists():
            cfg = replace(cfg, nsum=str(d / "nsum.csv"))
    for flag, key in (("multiplier", "multiplier"), ("nsum", "nsum"), ("population", "population"), ("out", "out")):
        v = getattr(args, flag)
        if v is not None:
            cfg = replace(cfg, **{key: v})
    s = {}
    for flag, key in (
        ("seed", "seed"), ("iters", "n_iter"), ("burn_in", "burn_in"), ("thin", "thin"),
        ("chains", "n_chains"), ("proposal_sd", "proposal_sd"),
    ):
        v = getattr(args, flag)
        if v is not None:
            s[key] = v
    try:
        if s:
            cfg = replace(cfg, sampler=replace(cfg.sampler, **s))
        if args.seed is not None:
            cfg = replace(cfg, simulation=replace(cfg.simulation, seed=args.seed))
        if args.sigma_c is not None:
            cfg = replace(cfg, sigma_c=args.sigma_c)
        if args.datasets is not None:
            cfg = replace(cfg, n_datasets=args.datasets)
        if args.mode is not None:
            cfg = replace(cfg, mode=args.mode)
        if args.remove:
            cfg = replace(cfg, remove=tuple(args.remove))
        if args.jobs is not None:
            cfg = replace(cfg, jobs=args.jobs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _load(cfg: RunConfig):
    if not cfg.population or not cfg.multiplier:
        raise ConfigError("--multiplier and --population (or --data-dir) are required")
    return load_dataset(cfg.multiplier, cfg.nsum, cfg.population)


def cmd_validate(cfg: RunConfig) -> int:
    data = _load(cfg)
    print(
        f"ok: {data.n_cities} cities, {data.n_subgroups} subgroups, years {data.year_min}-{data.year_max}, "
        f"{len(data.multiplier_records)} multiplier and {len(data.nsum_records)} NSUM records"
    )
    return EXIT_OK


def cmd_fit(cfg: RunConfig) -> int:
    data = _load(cfg)
    samples = run_chain(data, cfg.priors, cfg.sampler)
    summary = summarize(samples)
    report = DiagnosticsReport(residuals=residual_report(summary, data)) if not data.is_empty else None
    echo = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    files = write_summary(summary, report, cfg.out, config=echo)
    print(f"wrote {len(files)} files to {cfg.out}")
    return EXIT_OK


def _listify(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def cmd_simulate(cfg: RunConfig) -> int:
    sim = cfg.simulation
    if cfg.sigma_c:
        sim = replace(sim, sigma_c=cfg.sigma_c[0], violation_mode=cfg.mode if cfg.sigma_c[0] > 0 else sim.violation_mode)
    data, truth = simulate_dataset(sim)
    write_dataset(data, cfg.out)
    write_json(Path(cfg.out) / "truth.json", {"simulation": _listify(sim.to_dict()), **truth.to_dict()})
    print(f"wrote synthetic dataset to {cfg.out}")
    return EXIT_OK


def cmd_study(cfg: RunConfig) -> int:
    base = replace(cfg.simulation, violation_mode=cfg.mode)
    study = run_bias_study(base, list(cfg.sigma_c), cfg.n_datasets, cfg.sampler, cfg.priors, n_jobs=cfg.jobs)
    write_study(study, cfg.out)
    write_json(Path(cfg.out) / "study_config.json", cfg.to_dict())
    print(study.table.to_string(index=False))
    return EXIT_OK


def cmd_loo(cfg: RunConfig) -> int:
    data = _load(cfg)
    res = loo_cv(data, cfg.priors, cfg.sampler, n_jobs=cfg.jobs)
    write_frame(Path(cfg.out) / "loo_predictions.csv", res.predictions)
    write_json(Path(cfg.out) / "loo.json", res.to_dict())
    print(json.dumps(res.summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_ppc(cfg: RunConfig) -> int:
    data = _load(cfg)
    samples = run_chain(data, cfg.priors, cfg.sampler)
    res = posterior_predictive_check(samples, data, seed=cfg.sampler.seed)
    write_frame(Path(cfg.out) / "ppc.csv", res.table)
    write_frame(Path(cfg.out) / "ppc_replications.csv", res.replications)
    print(res.table.to_string(index=False))
    return EXIT_OK


def cmd_contribution(cfg: RunConfig) -> int:
    data = _load(cfg)
    res = source_contribution(data, cfg.priors, cfg.sampler, sources=cfg.remove or None)
    write_frame(Path(cfg.out) / "contribution.csv", res.table)
    if res.warnings:
        write_csv(Path(cfg.out) / "contribution_warnings.csv", ["warning"], [{"warning": w} for w in res.warnings])
        for w in res.warnings:
            log.warning(w)
    print(res.table.to_string(index=False))
    return EXIT_OK


HANDLERS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "study": cmd_study,
    "loo": cmd_loo,
    "ppc": cmd_ppc,
    "contribution": cmd_contribution,
    "validate": cmd_validate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return HANDLERS[args.command](cfg)
    except (DataError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
