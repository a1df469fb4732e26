"""Command-line entry point: simulate, extract, bootstrap, impute, experiment.

Errors are reported as a single stderr line ``error[<category>]: <message>``.
Exit codes: 2 usage/config, 3 I/O or malformed input, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .core import (ConditioningError, ConfigError, DataMatrix, DomainError, ParseError,
                   PeriodicImputeError, PreconditionError, SeedSpec, atomic_write_text,
                   derive_stream, read_csv, rows_text, write_csv)
from .evaluate import (LONG_HEADER, SCORING_POLICY, TABLE_HEADER, ExperimentConfig, long_rows,
                       replication_seed, run_grid, table_rows)
from .kzft import bandpass_component
from .mvn_em import EmOptions
from .pipeline import MethodConfig, make_band, run_imputation, stage_bands
from .simulate import (MISSING_PERCENTS, NOISE_TIERS, add_noise, apply_mcar, generate_signal,
                       stage_spec)
from .vbpbb import VbpbbParams, block_length_for, vbpbb_covariate, vbpbb_replicates

log = logging.getLogger("periodic_impute")

EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 2, 3, 4


class UsageError(PeriodicImputeError):
    category = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(f"error[usage]: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _parse_band(text: str):
    """``PERIOD[:M[:K]]`` or a known band name such as ``annual``."""
    parts = text.split(":")
    head = parts[0]
    kw = {}
    if len(parts) > 1 and parts[1]:
        kw["m"] = int(parts[1])
    if len(parts) > 2 and parts[2]:
        kw["k"] = int(parts[2])
    if len(parts) > 3:
        raise UsageError(f"band spec {text!r} has too many fields")
    try:
        period = Fraction(head)
    except ValueError:
        return make_band(head, **kw)
    name = {Fraction(365): "annual", Fraction(365, 2): "harmonic", Fraction(30): "monthly"}.get(period)
    if name is not None and "m" not in kw:
        return make_band(name, **kw)
    return make_band(name or f"p{str(period).replace('/', '_')}", period=period, **kw)


def _bands_from_args(args):
    if args.band:
        return tuple(_parse_band(b) for b in args.band)
    if args.stage is not None:
        return stage_bands(args.stage)
    raise UsageError("give --stage or at least one --band")


def _source_column(matrix: DataMatrix, requested: str | None) -> str:
    if requested:
        matrix.col_index(requested)
        return requested
    for name in ("noisy", "y"):
        if name in matrix.names:
            return name
    raise UsageError("input has no 'noisy' or 'y' column; pass --column")


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    if args.noise not in NOISE_TIERS:
        raise UsageError(f"unknown noise tier {args.noise!r}")
    seed = replication_seed(args.seed, args.stage, args.noise, args.missing, 0)
    signal = generate_signal(stage_spec(args.stage, args.n))
    noisy = add_noise(signal, NOISE_TIERS[args.noise], derive_stream(seed.child("draw", 0)))
    masked = apply_mcar(noisy, args.missing / 100.0, derive_stream(seed.child("draw", 1)))
    matrix = DataMatrix.from_columns(
        {"t": signal.index.astype(float), "complete": signal.values,
         "noisy": noisy.values, "y": masked.values},
        {"y": masked.mask})
    write_csv(matrix, args.out)
    log.info("wrote %s (%d rows, %d missing)", args.out, signal.n, (~masked.mask).sum())
    return 0


def cmd_extract(args) -> int:
    data = read_csv(args.input)
    col = _source_column(data, args.column)
    series = data.series(col)
    bands = _bands_from_args(args)
    cols = {"t": np.arange(series.n, dtype=float)}
    meta = []
    for band in bands:
        cols[f"comp_{band.name}"] = bandpass_component(series, band.kzft).values
        meta.append({"name": band.name, "period": str(band.period),
                     "kzft_m": band.kzft.m, "kzft_k": band.kzft.k})
    write_csv(DataMatrix.from_columns(cols), args.out)
    atomic_write_text(str(args.out) + ".meta.json",
                      _dump_json({"source": str(args.input), "column": col, "bands": meta,
                                  "edge_policy": "truncate and renormalise kernel",
                                  "version": __version__}))
    return 0


def cmd_bootstrap(args) -> int:
    data = read_csv(args.input)
    col = args.column or next((c for c in data.names if c.startswith("comp_")), None)
    if col is None:
        raise UsageError("no component column found; pass --column")
    comp = data.series(col)
    period = Fraction(args.period)
    params = VbpbbParams(args.block_length or block_length_for(period), args.replicates)
    seed = SeedSpec(args.seed, (("bootstrap", 0),))
    cov = vbpbb_covariate(comp, params, derive_stream(seed), float(1 / period))
    cols = {"t": np.arange(comp.n, dtype=float), "covariate": cov.covariate.values}
    write_csv(DataMatrix.from_columns(cols), args.out)
    if args.replicates_out:
        reps = vbpbb_replicates(comp, params, derive_stream(seed))
        t = np.arange(comp.n)
        rows = ([str(r), str(i), repr(float(v))] for r in range(reps.shape[0])
                for i, v in zip(t, reps[r]))
        atomic_write_text(args.replicates_out, rows_text(("replicate", "t", "value"), rows))
    atomic_write_text(str(args.out) + ".meta.json", _dump_json({
        "source": str(args.input), "column": col, "period": str(period),
        "block_length": cov.block_length, "tail": cov.tail,
        "tail_policy": "full blocks only, truncate to n", "replicates": cov.replicates,
        "seed": {"master_seed": seed.master_seed, "stream_path": [list(p) for p in seed.stream_path]},
        "version": __version__}))
    return 0


def cmd_impute(args) -> int:
    data = read_csv(args.input)
    ycol = args.column
    masked = data.series(ycol)
    source = None
    bands = ()
    if args.method == "vbpbb":
        bands = _bands_from_args(args)
        scol = args.source_column or ("noisy" if "noisy" in data.names else None)
        if scol is None:
            raise UsageError("vbpbb needs a fully observed source column; pass --source-column")
        source = data.series(scol)
    config = MethodConfig(args.method, bands, args.time_degree, args.m, args.smoothing, args.pool,
                          EmOptions(tol=args.tol, max_iter=args.max_iter))
    if masked.fully_observed:
        log.warning("input column %r has no missing cells; output equals input", ycol)
    seed = SeedSpec(args.seed, (("impute", 0),))
    out = run_imputation(masked, source, config, seed)
    outdir = Path(args.out_dir)
    cols = {"t": np.arange(masked.n, dtype=float)}
    for j, c in enumerate(out.completed.completed, start=1):
        cols[f"imp_{j}"] = c.column("y")
    cols["pooled"] = out.pooled_series.values
    write_csv(DataMatrix.from_columns(cols), outdir / "imputations.csv")
    meta = dict(out.metadata, input=str(args.input), column=ycol, version=__version__)
    atomic_write_text(outdir / "metadata.json", _dump_json(meta))
    return 0


# ---------------------------------------------------------------------------
# experiment config

def _csv_list(text: str, cast=str):
    return tuple(cast(x.strip()) for x in text.split(",") if x.strip())


def _number(text: str):
    x = float(text)
    return int(x) if x.is_integer() else x


def load_config(path) -> tuple[ExperimentConfig, dict]:
    """Parse the INI experiment config; returns the config and extra settings (out dir)."""
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
    kw: dict = {}
    extra: dict = {}
    known = {"stages", "noise", "missing", "methods", "reps", "seed", "n", "amplitude",
             "m_imputations", "time_basis_degree", "smoothing", "out"}
    if cp.has_section("experiment"):
        sec = cp["experiment"]
        unknown = set(sec) - known
        if unknown:
            raise ConfigError(f"unknown keys in [experiment]: {sorted(unknown)}")
        if "stages" in sec:
            kw["stages"] = _csv_list(sec["stages"], int)
        if "noise" in sec:
            kw["noise_tiers"] = _csv_list(sec["noise"])
        if "missing" in sec:
            kw["missing_pcts"] = _csv_list(sec["missing"], _number)
        if "methods" in sec:
            kw["methods"] = _csv_list(sec["methods"])
        for key, cast in (("reps", int), ("n", int), ("amplitude", float),
                          ("m_imputations", int), ("time_basis_degree", int)):
            if key in sec:
                kw[key] = cast(sec[key])
        if "seed" in sec:
            kw["master_seed"] = int(sec["seed"])
        if "smoothing" in sec:
            v = sec["smoothing"].strip().lower()
            kw["smoothing"] = None if v in ("", "off", "none") else int(v)
        if "out" in sec:
            extra["out"] = sec["out"]
    if cp.has_section("em"):
        sec = cp["em"]
        kw["em"] = EmOptions(tol=sec.getfloat("tol", 1e-4), max_iter=sec.getint("max_iter", 1000),
                             ridge=sec.getfloat("ridge", 0.0),
                             standardize=sec.getboolean("standardize", True))
    overrides = {}
    for name in cp.sections():
        if name.startswith("band."):
            band = name.split(".", 1)[1]
            sec = cp[name]
            unknown = set(sec) - {"m", "k", "replicates", "block_length"}
            if unknown:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
            overrides[band] = {k: int(v) for k, v in sec.items()}
        elif name not in ("experiment", "em"):
            raise ConfigError(f"unknown section [{name}]")
    if overrides:
        kw["band_overrides"] = overrides
    return ExperimentConfig(**kw), extra


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "stages": list(cfg.stages), "noise_tiers": list(cfg.noise_tiers),
        "missing_pcts": list(cfg.missing_pcts), "methods": list(cfg.methods),
        "reps": cfg.reps, "master_seed": cfg.master_seed, "n": cfg.n, "amplitude": cfg.amplitude,
        "m_imputations": cfg.m_imputations, "time_basis_degree": cfg.time_basis_degree,
        "smoothing": cfg.smoothing,
        "em": {"tol": cfg.em.tol, "max_iter": cfg.em.max_iter, "ridge": cfg.em.ridge,
               "standardize": cfg.em.standardize},
        "band_overrides": cfg.band_overrides,
    }


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    em = d.pop("em", None)
    if em is not None:
        d["em"] = EmOptions(**em)
    return ExperimentConfig(**d)


def build_manifest(cfg: ExperimentConfig) -> dict:
    return {
        "tool": "periodic-impute",
        "version": __version__,
        "config": config_to_dict(cfg),
        "resolved": cfg.describe(),
        "decisions": {
            "scoring_policy": SCORING_POLICY,
            "score_aggregation": "mean of per-imputation metrics, then mean over replications",
            "pairing": "baseline and vbpbb share each replication's noise and mask",
            "kzft_edge_policy": "truncate and renormalise kernel",
            "vbpbb_tail_policy": "full blocks only, replicates truncated to n",
            "vbpbb_median": "mean of the two central order statistics for even R",
            "sinusoid_form": "A sin(2 pi f t), phase 0",
            "baseline_time_basis": f"polynomial in t, degree {cfg.time_basis_degree}",
            "em_convergence": "max abs change of standardised mu/Sigma below tol",
            "rng": "PCG64 seeded by BLAKE2b(master_seed, labelled stream path)",
        },
        "outputs": ["results.csv", "long.csv", "manifest.json"],
    }


def cmd_experiment(args) -> int:
    extra: dict = {}
    if args.replay:
        try:
            manifest = json.loads(Path(args.replay).read_text(encoding="utf-8"))
            cfg = config_from_dict(manifest["config"])
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot replay {args.replay}: {exc}") from None
    elif args.config:
        cfg, extra = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    if args.paper_grid:
        cfg = config_from_dict(dict(config_to_dict(cfg), stages=[1, 2, 3],
                                    noise_tiers=list(NOISE_TIERS),
                                    missing_pcts=list(MISSING_PERCENTS),
                                    methods=["baseline", "vbpbb"]))
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.reps is not None:
        overrides["reps"] = args.reps
    if overrides:
        cfg = config_from_dict(dict(config_to_dict(cfg), **overrides))
    out = Path(args.out or extra.get("out") or "results")

    t0 = time.monotonic()
    total = len(cfg.stages) * len(cfg.noise_tiers) * len(cfg.missing_pcts) * cfg.reps
    log.info("running %d replications over %d cells with %d job(s)",
             total, total // cfg.reps, args.jobs)

    def progress(i, n):
        if i % max(1, n // 20) == 0 or i == n:
            log.info("  %d/%d replications (%.1fs)", i, n, time.monotonic() - t0)

    cells = run_grid(cfg, jobs=args.jobs, progress=progress)
    atomic_write_text(out / "results.csv", rows_text(TABLE_HEADER, table_rows(cells)))
    atomic_write_text(out / "long.csv", rows_text(LONG_HEADER, long_rows(cells)))
    atomic_write_text(out / "manifest.json", _dump_json(build_manifest(cfg)))
    failed = [c for c in cells if c.status != "ok"]
    log.info("wrote %s in %.1fs (%d cells, %d failed)", out, time.monotonic() - t0,
             len(cells), len(failed))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="periodic-impute", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a stage signal, add noise, apply MCAR")
    s.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    s.add_argument("--n", type=int, default=6000)
    s.add_argument("--noise", default="very-low", choices=list(NOISE_TIERS))
    s.add_argument("--missing", type=float, default=5.0, help="percent of values to mask")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="series.csv")
    s.set_defaults(func=cmd_simulate)

    def add_bands(q):
        q.add_argument("--stage", type=int, choices=(1, 2, 3),
                       help="use the stage's preset bands")
        q.add_argument("--band", action="append",
                       help="PERIOD[:M[:K]] or a band name (annual, harmonic, monthly); repeatable")

    e = sub.add_parser("extract", help="KZFT bandpass components of a fully observed column")
    e.add_argument("--input", required=True)
    e.add_argument("--column")
    add_bands(e)
    e.add_argument("--out", default="components.csv")
    e.set_defaults(func=cmd_extract)

    b = sub.add_parser("bootstrap", help="periodic block bootstrap median covariate")
    b.add_argument("--input", required=True)
    b.add_argument("--column")
    b.add_argument("--period", required=True, help="cycle length in days, e.g. 365 or 365/2")
    b.add_argument("--block-length", type=int)
    b.add_argument("--replicates", type=int, default=1000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="covariate.csv")
    b.add_argument("--replicates-out", help="also write all replicates in long format")
    b.set_defaults(func=cmd_bootstrap)

    i = sub.add_parser("impute", help="multiple imputation with or without periodic covariates")
    i.add_argument("--input", required=True)
    i.add_argument("--column", default="y")
    i.add_argument("--source-column", help="fully observed column for band extraction")
    i.add_argument("--method", choices=("baseline", "vbpbb"), default="vbpbb")
    add_bands(i)
    i.add_argument("--m", type=int, default=20, help="number of imputations")
    i.add_argument("--time-degree", type=int, default=3)
    i.add_argument("--smoothing", type=int, help="odd moving-average window for imputed cells")
    i.add_argument("--pool", choices=("mean", "median"), default="mean")
    i.add_argument("--tol", type=float, default=1e-4)
    i.add_argument("--max-iter", type=int, default=1000)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out-dir", default="imputed")
    i.set_defaults(func=cmd_impute)

    x = sub.add_parser("experiment", help="run the Monte-Carlo grid")
    x.add_argument("--config", help="INI config file")
    x.add_argument("--replay", help="rerun from a manifest.json")
    x.add_argument("--paper-grid", action="store_true", help="full 3 x 5 x 5 x 2 factorial")
    x.add_argument("--seed", type=int)
    x.add_argument("--reps", type=int)
    x.add_argument("--jobs", type=int, default=1)
    x.add_argument("--out")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ConfigError, DomainError, PreconditionError) as exc:
        sys.stderr.write(f"error[{exc.category}]: {exc}\n")
        return EXIT_USAGE
    except (ParseError, OSError) as exc:
        cat = exc.category if isinstance(exc, ParseError) else "io"
        sys.stderr.write(f"error[{cat}]: {exc}\n")
        return EXIT_IO
    except (ConditioningError, ArithmeticError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(f"error[numerical]: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
