"""Baseline and periodic-covariate imputation configurations, pooling, smoothing."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .core import ConfigError, DataMatrix, DomainError, SeedSpec, TimeSeries, derive_stream
from .kzft import KzftParams, bandpass_component
from .mvn_em import EmOptions, ImputationSet, emb_impute
from .simulate import BAND_PERIODS, STAGE_BANDS
from .vbpbb import DEFAULT_REPLICATES, PeriodicCovariate, VbpbbParams, block_length_for, vbpbb_covariate

METHODS = ("baseline", "vbpbb")
DEFAULT_M_IMPUTATIONS = 20
DEFAULT_TIME_DEGREE = 3

# kz window per band: 731 days resolves annual vs semiannual, 365 suffices for monthly
DEFAULT_KZ_WINDOW = {"annual": 731, "harmonic": 731, "monthly": 365}
DEFAULT_KZ_ITERATIONS = 3


@dataclass(frozen=True)
class Band:
    name: str
    period: Fraction
    kzft: KzftParams
    vbpbb: VbpbbParams

    @property
    def frequency(self) -> float:
        return float(1 / self.period)


def make_band(name: str, period=None, m: int | None = None, k: int = DEFAULT_KZ_ITERATIONS,
              replicates: int = DEFAULT_REPLICATES, block_length: int | None = None) -> Band:
    """Band with the default filter and block settings, overridable per field."""
    if period is None:
        if name not in BAND_PERIODS:
            raise ConfigError(f"band {name!r} needs an explicit period")
        period = BAND_PERIODS[name]
    period = Fraction(period) if not isinstance(period, float) \
        else Fraction(period).limit_denominator(10_000)
    if m is None:
        m = DEFAULT_KZ_WINDOW.get(name)
        if m is None:
            # roughly two periods, forced odd
            m = 2 * int(round(float(period))) + 1
    if block_length is None:
        block_length = block_length_for(period)
    return Band(name, period, KzftParams(float(1 / period), int(m), int(k)),
                VbpbbParams(int(block_length), int(replicates)))


def stage_bands(stage: int, **overrides) -> tuple[Band, ...]:
    if stage not in STAGE_BANDS:
        raise ConfigError(f"unknown stage {stage!r}")
    return tuple(make_band(b, **overrides.get(b, {})) for b in STAGE_BANDS[stage])


@dataclass(frozen=True)
class MethodConfig:
    method: str = "vbpbb"
    bands: tuple[Band, ...] = ()
    time_basis_degree: int = DEFAULT_TIME_DEGREE
    m_imputations: int = DEFAULT_M_IMPUTATIONS
    smoothing: int | None = None
    pool: str = "mean"
    em: EmOptions = field(default_factory=EmOptions)

    def __post_init__(self):
        object.__setattr__(self, "bands", tuple(self.bands))
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method == "baseline" and self.bands:
            raise ConfigError("baseline method takes no periodic bands")
        if self.method == "vbpbb" and not self.bands:
            raise ConfigError("vbpbb method needs at least one band")
        if not 0 <= self.time_basis_degree <= 3:
            raise ConfigError(f"time_basis_degree must be in 0..3, got {self.time_basis_degree}")
        if self.m_imputations < 1:
            raise ConfigError("m_imputations must be >= 1")
        if self.smoothing is not None and (self.smoothing < 1 or self.smoothing % 2 == 0):
            raise ConfigError(f"smoothing window must be odd and positive, got {self.smoothing}")
        if self.pool not in ("mean", "median"):
            raise ConfigError(f"pool must be 'mean' or 'median', got {self.pool!r}")
        names = [b.name for b in self.bands]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate band names {names}")

    def describe(self) -> dict:
        return {
            "method": self.method,
            "time_basis_degree": self.time_basis_degree,
            "m_imputations": self.m_imputations,
            "smoothing": self.smoothing,
            "pool": self.pool,
            "em": {"tol": self.em.tol, "max_iter": self.em.max_iter,
                   "ridge": self.em.ridge, "standardize": self.em.standardize},
            "bands": [band_describe(b) for b in self.bands],
        }


def band_describe(b: Band) -> dict:
    return {"name": b.name, "period": str(b.period), "frequency": b.frequency,
            "kzft_m": b.kzft.m, "kzft_k": b.kzft.k,
            "block_length": b.vbpbb.block_length, "replicates": b.vbpbb.replicates}


@dataclass(frozen=True, eq=False)
class ImputationOutput:
    completed: ImputationSet
    pooled_series: TimeSeries
    covariates: list[PeriodicCovariate]
    metadata: dict


def extract_covariates(source: TimeSeries, bands: Sequence[Band],
                       seed: SeedSpec) -> list[PeriodicCovariate]:
    """Filter each band out of ``source`` and reduce its bootstrap to a median covariate."""
    out = []
    for i, band in enumerate(bands):
        comp = bandpass_component(source, band.kzft)
        stream = derive_stream(seed.child("band", i))
        out.append(vbpbb_covariate(comp, band.vbpbb, stream, band.frequency))
    return out


def time_columns(n: int, degree: int) -> dict[str, np.ndarray]:
    t = np.arange(n, dtype=float)
    return {("t" if d == 1 else f"t{d}"): t ** d for d in range(1, degree + 1)}


def build_design(masked: TimeSeries, covariates: Sequence[PeriodicCovariate],
                 config: MethodConfig) -> DataMatrix:
    """Columns ``y``, the polynomial time basis, then one ``c_<band>`` per covariate."""
    if config.method == "vbpbb" and not covariates:
        raise ConfigError("vbpbb design needs at least one periodic covariate")
    n = masked.n
    cols = {"y": masked.values}
    masks = {"y": masked.mask}
    cols.update(time_columns(n, config.time_basis_degree))
    names = [b.name for b in config.bands] if config.bands else \
        [f"band{i}" for i in range(len(covariates))]
    if covariates and len(names) != len(covariates):
        raise ConfigError(f"{len(covariates)} covariates for {len(names)} bands")
    for name, cov in zip(names, covariates):
        if cov.covariate.n != n:
            raise DomainError(f"covariate {name!r} length {cov.covariate.n} != series length {n}")
        if not cov.covariate.fully_observed:
            raise DomainError(f"covariate {name!r} has missing values")
        cols[f"c_{name}"] = cov.covariate.values
    return DataMatrix.from_columns(cols, masks)


def smooth_imputed(values: np.ndarray, imputed: np.ndarray, window: int) -> np.ndarray:
    """Centred moving average of odd ``window``, written only at imputed positions."""
    values = np.asarray(values, dtype=float)
    kernel = np.ones(window)
    sums = np.convolve(values, kernel, mode="same")
    counts = np.convolve(np.ones_like(values), kernel, mode="same")
    out = values.copy()
    idx = np.asarray(imputed)
    out[idx] = (sums / counts)[idx]
    return out


def pool_series(imputations: ImputationSet | Sequence[np.ndarray], positions,
                column: str = "y", how: str = "mean") -> np.ndarray:
    """Pointwise mean (or median) across imputations at ``positions``; other positions verbatim."""
    if isinstance(imputations, ImputationSet):
        series = [c.column(column) for c in imputations.completed]
    else:
        series = [np.asarray(s, dtype=float) for s in imputations]
    if not series:
        raise ValueError("cannot pool an empty imputation set")
    stack = np.vstack(series)
    out = stack[0].copy()
    positions = np.asarray(positions, dtype=int)
    if positions.size:
        reduce = np.mean if how == "mean" else np.median
        out[positions] = reduce(stack[:, positions], axis=0)
    return out


@dataclass(frozen=True)
class RubinPooled:
    estimate: float
    within: float
    between: float | None
    total: float | None
    m: int


def rubin_pool(estimates, variances=None) -> RubinPooled:
    """Combine per-imputation estimates: mean, W, B and T = W + (1 + 1/m) B.

    With a single imputation the between-imputation variance is undefined
    and ``between``/``total`` are None.
    """
    q = np.asarray(estimates, dtype=float)
    m = q.size
    if m == 0:
        raise ValueError("no estimates to pool")
    w = float(np.mean(variances)) if variances is not None else 0.0
    if m == 1:
        return RubinPooled(float(q[0]), w, None, None, 1)
    b = float(np.var(q, ddof=1))
    return RubinPooled(float(q.mean()), w, b, w + (1 + 1 / m) * b, m)


def run_imputation(masked: TimeSeries, complete_source: TimeSeries | None,
                   config: MethodConfig, seed: SeedSpec) -> ImputationOutput:
    """Extract covariates (vbpbb only), build the design, run EMB and pool.

    Band ``i`` bootstraps on ``seed/covariates=0/band=i``; imputation ``j``
    draws on ``seed/emb=0/imputation=j``.
    """
    covariates: list[PeriodicCovariate] = []
    if config.method == "vbpbb":
        if complete_source is None:
            raise ConfigError("vbpbb method needs a fully observed source series")
        if complete_source.n != masked.n:
            raise DomainError(
                f"source length {complete_source.n} != series length {masked.n}")
        covariates = extract_covariates(complete_source, config.bands, seed.child("covariates", 0))
    design = build_design(masked, covariates, config)
    imps = emb_impute(design, config.m_imputations, config.em, seed.child("emb", 0))
    missing = masked.missing_positions
    if config.smoothing and missing.size:
        smoothed = []
        for c in imps.completed:
            y = smooth_imputed(c.column("y"), missing, config.smoothing)
            smoothed.append(c.with_column("y", y, np.ones(masked.n, dtype=bool)))
        imps = ImputationSet(smoothed, imps.params_per_imputation)
    pooled = pool_series(imps, missing, how=config.pool)
    pooled[masked.mask] = masked.values[masked.mask]
    metadata = {
        "config": config.describe(),
        "seed": {"master_seed": seed.master_seed,
                 "stream_path": [list(p) for p in seed.stream_path]},
        "n": masked.n,
        "n_missing": int(missing.size),
        "design_columns": list(design.names),
        "covariates": [{"frequency": c.frequency, "block_length": c.block_length,
                        "tail": c.tail, "tail_policy": "full blocks only, truncate to n",
                        "replicates": c.replicates} for c in covariates],
        "em": [{"iters": p.iters, "converged": p.converged, "ridge_events": p.ridge_events}
               for p in imps.params_per_imputation],
    }
    return ImputationOutput(imps, TimeSeries(pooled), covariates, metadata)
