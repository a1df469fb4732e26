"""Scoring, the Monte-Carlo replication grid and result tables."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import DomainError, PeriodicImputeError, SeedSpec, TimeSeries, derive_stream, format_float
from .mvn_em import EmOptions, ImputationSet
from .pipeline import (DEFAULT_M_IMPUTATIONS, DEFAULT_TIME_DEGREE, METHODS, MethodConfig,
                       band_describe, run_imputation, stage_bands)
from .simulate import (DEFAULT_AMPLITUDE, DEFAULT_N, MISSING_PERCENTS, NOISE_LABELS, NOISE_TIERS,
                       STAGE_BANDS, add_noise, apply_mcar, generate_signal, stage_spec)

log = logging.getLogger(__name__)

SCORING_POLICY = "masked positions only, against the noisy pre-masking values"
TABLE_HEADER = ("Stage", "Noise", "Missing", "Method", "reps", "MAE_mean", "RMSE_mean",
                "Percent of Change in MAE", "Percent of Change in RMSE", "status")
LONG_HEADER = ("stage", "noise", "missing", "method", "metric", "value")


@dataclass(frozen=True)
class Metrics:
    mae: float
    rmse: float
    n_scored: int


def score(actual: TimeSeries | np.ndarray, imputed, positions) -> Metrics:
    """MAE and RMSE of ``imputed`` against ``actual`` over ``positions`` only."""
    positions = np.asarray(positions, dtype=int)
    if positions.size == 0:
        raise DomainError("no positions to score")
    if isinstance(actual, TimeSeries):
        if not actual.fully_observed:
            raise DomainError("actual series must be fully observed")
        actual = actual.values
    err = np.asarray(imputed, dtype=float)[positions] - np.asarray(actual, dtype=float)[positions]
    abs_err = np.abs(err)
    mae = float(np.mean(abs_err))
    # scale before squaring so tiny errors do not underflow
    top = float(abs_err.max())
    rmse = top * float(np.sqrt(np.mean((abs_err / top) ** 2))) if top > 0 else 0.0
    # power-mean inequality, with slack for rounding
    assert rmse >= mae * (1 - 1e-12), (mae, rmse)
    return Metrics(mae, rmse, int(positions.size))


def pooled_score(imputations: ImputationSet, actual, positions, column: str = "y") -> Metrics:
    """Average of the per-imputation metrics over the completed datasets."""
    scores = [score(actual, c.column(column), positions) for c in imputations.completed]
    return Metrics(float(np.mean([s.mae for s in scores])),
                   float(np.mean([s.rmse for s in scores])),
                   scores[0].n_scored)


def percent_change(with_value: float, without_value: float) -> float:
    """100 * (with - without) / without; negative means improvement."""
    if not without_value > 0:
        raise DomainError(f"baseline value must be positive, got {without_value}")
    return 100.0 * (with_value - without_value) / without_value


def format_percent(pct: float | None) -> str:
    if pct is None or not math.isfinite(pct):
        return ""
    # whole percents, rounding half away from zero
    r = math.floor(abs(pct) + 0.5) * (1 if pct >= 0 else -1)
    return f"{r:d}%"


# ---------------------------------------------------------------------------
# experiment grid

@dataclass(frozen=True)
class ExperimentConfig:
    stages: tuple[int, ...] = (1, 2, 3)
    noise_tiers: tuple[str, ...] = tuple(NOISE_TIERS)
    missing_pcts: tuple[float, ...] = MISSING_PERCENTS
    methods: tuple[str, ...] = METHODS
    reps: int = 30
    master_seed: int = 0
    n: int = DEFAULT_N
    amplitude: float = DEFAULT_AMPLITUDE
    m_imputations: int = DEFAULT_M_IMPUTATIONS
    time_basis_degree: int = DEFAULT_TIME_DEGREE
    smoothing: int | None = None
    em: EmOptions = field(default_factory=EmOptions)
    band_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("stages", "noise_tiers", "missing_pcts", "methods"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        bad = [s for s in self.stages if s not in STAGE_BANDS]
        if bad:
            raise DomainError(f"unknown stages {bad}")
        bad = [t for t in self.noise_tiers if t not in NOISE_TIERS]
        if bad:
            raise DomainError(f"unknown noise tiers {bad}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise DomainError(f"unknown methods {bad}")
        bad = [p for p in self.missing_pcts if not 0 < p < 100]
        if bad:
            # 0 % leaves nothing to score
            raise DomainError(f"missing percentages must be in (0, 100): {bad}")
        if self.reps < 1:
            raise DomainError("reps must be >= 1")

    def method_config(self, stage: int, method: str) -> MethodConfig:
        bands = stage_bands(stage, **self.band_overrides) if method == "vbpbb" else ()
        return MethodConfig(method, bands, self.time_basis_degree, self.m_imputations,
                            self.smoothing, "mean", self.em)

    def describe(self) -> dict:
        d = {
            "stages": list(self.stages),
            "noise_tiers": list(self.noise_tiers),
            "noise_variances": {t: NOISE_TIERS[t] for t in self.noise_tiers},
            "missing_pcts": list(self.missing_pcts),
            "methods": list(self.methods),
            "reps": self.reps,
            "master_seed": self.master_seed,
            "n": self.n,
            "amplitude": self.amplitude,
            "m_imputations": self.m_imputations,
            "time_basis_degree": self.time_basis_degree,
            "smoothing": self.smoothing,
            "em": asdict(self.em),
            "band_overrides": self.band_overrides,
            "bands_by_stage": {str(s): [band_describe(b) for b in stage_bands(s, **self.band_overrides)]
                               for s in self.stages},
        }
        return d


@dataclass(frozen=True)
class ExperimentCell:
    stage: int
    noise_tier: str
    missing_pct: float
    method: str
    reps: int
    mae_mean: float
    rmse_mean: float
    pct_change_mae: float | None = None
    pct_change_rmse: float | None = None
    status: str = "ok"

    @property
    def key(self):
        return (self.stage, list(NOISE_TIERS).index(self.noise_tier), self.missing_pct,
                METHODS.index(self.method))


def replication_seed(master_seed: int, stage: int, tier: str, pct: float, rep: int) -> SeedSpec:
    return SeedSpec(master_seed, (
        ("stage", stage),
        ("noise", list(NOISE_TIERS).index(tier)),
        ("missing_bp", int(round(pct * 100))),
        ("rep", rep),
    ))


def run_replication(cfg: ExperimentConfig, stage: int, tier: str, pct: float,
                    rep: int) -> dict[str, Metrics | str]:
    """One paired replication: both methods see the same noise and mask."""
    seed = replication_seed(cfg.master_seed, stage, tier, pct, rep)
    signal = generate_signal(stage_spec(stage, cfg.n, amplitude=cfg.amplitude))
    noisy = add_noise(signal, NOISE_TIERS[tier], derive_stream(seed.child("draw", 0)))
    masked = apply_mcar(noisy, pct / 100.0, derive_stream(seed.child("draw", 1)))
    positions = masked.missing_positions
    out: dict[str, Metrics | str] = {}
    for method in cfg.methods:
        try:
            mc = cfg.method_config(stage, method)
            res = run_imputation(masked, noisy, mc, seed.child("method", METHODS.index(method)))
            out[method] = pooled_score(res.completed, noisy, positions)
        except (PeriodicImputeError, ArithmeticError, ValueError, AssertionError) as exc:
            out[method] = f"{type(exc).__name__}: {exc}"
    return out


def _task(args):
    cfg, stage, tier, pct, rep = args
    return run_replication(cfg, stage, tier, pct, rep)


def grid_tasks(cfg: ExperimentConfig):
    return [(stage, tier, pct, rep)
            for stage in cfg.stages
            for tier in cfg.noise_tiers
            for pct in cfg.missing_pcts
            for rep in range(cfg.reps)]


def run_grid(cfg: ExperimentConfig, jobs: int = 1, progress=None) -> list[ExperimentCell]:
    """Run every (stage, noise, missing) cell for ``cfg.reps`` paired replications.

    Results are independent of ``jobs``: each replication derives its own
    streams and cells are assembled in sorted key order.
    """
    tasks = grid_tasks(cfg)
    args = [(cfg,) + t for t in tasks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_task, args, chunksize=max(1, len(args) // (4 * jobs))))
    else:
        results = []
        for i, a in enumerate(args):
            results.append(_task(a))
            if progress:
                progress(i + 1, len(args))
    by_cell: dict[tuple, list[dict]] = {}
    for (stage, tier, pct, rep), res in zip(tasks, results):
        by_cell.setdefault((stage, tier, pct), []).append(res)
    return _assemble(cfg, by_cell)


def _assemble(cfg: ExperimentConfig, by_cell) -> list[ExperimentCell]:
    cells = []
    for (stage, tier, pct), reps in by_cell.items():
        summary = {}
        for method in cfg.methods:
            vals = [r[method] for r in reps]
            failures = [v for v in vals if isinstance(v, str)]
            if failures:
                summary[method] = (math.nan, math.nan, f"failed: {failures[0]}")
            else:
                summary[method] = (float(np.mean([v.mae for v in vals])),
                                   float(np.mean([v.rmse for v in vals])), "ok")
        for method in cfg.methods:
            mae, rmse, status = summary[method]
            pm = pr = None
            if method == "vbpbb" and "baseline" in summary and status == "ok" \
                    and summary["baseline"][2] == "ok":
                pm = percent_change(mae, summary["baseline"][0])
                pr = percent_change(rmse, summary["baseline"][1])
            cells.append(ExperimentCell(stage, tier, pct, method, len(reps), mae, rmse,
                                        pm, pr, status))
    cells.sort(key=lambda c: c.key)
    return cells


# ---------------------------------------------------------------------------
# tables

_BAND_TITLES = {"annual": "Annual", "harmonic": "Harmonic", "monthly": "Monthly"}


def method_label(stage: int, method: str) -> str:
    if method == "baseline":
        return "Without VBPBB"
    names = [_BAND_TITLES.get(b, b.title()) for b in STAGE_BANDS[stage]]
    if len(names) == 1:
        return f"With VBPBB ({names[0]} component)"
    return f"With VBPBB ({' + '.join(names)})"


def _fmt_pct_label(pct: float) -> str:
    return str(int(pct)) if float(pct).is_integer() else format_float(pct)


def _num(x: float) -> str:
    return format_float(x) if math.isfinite(x) else ""


def table_rows(cells: Sequence[ExperimentCell]) -> list[list[str]]:
    """Rows in the results-table layout; percents are whole numbers."""
    return [[str(c.stage), NOISE_LABELS[c.noise_tier], _fmt_pct_label(c.missing_pct),
             method_label(c.stage, c.method), str(c.reps), _num(c.mae_mean), _num(c.rmse_mean),
             format_percent(c.pct_change_mae), format_percent(c.pct_change_rmse), c.status]
            for c in cells]


def long_rows(cells: Sequence[ExperimentCell]) -> list[list[str]]:
    """Plot-ready long format: one row per (cell, metric)."""
    rows = []
    for c in cells:
        metrics = [("mae_mean", c.mae_mean), ("rmse_mean", c.rmse_mean)]
        if c.pct_change_mae is not None:
            metrics += [("pct_change_mae", c.pct_change_mae), ("pct_change_rmse", c.pct_change_rmse)]
        for name, value in metrics:
            rows.append([str(c.stage), c.noise_tier, _fmt_pct_label(c.missing_pct),
                         c.method, name, _num(value)])
    return rows
