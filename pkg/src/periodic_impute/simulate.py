"""Synthetic periodic signals, Gaussian noise tiers and MCAR masking."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import DomainError, PreconditionError, TimeSeries

DEFAULT_N = 6000
DEFAULT_AMPLITUDE = 10.0

NOISE_TIERS = {
    "very-low": 0.1,
    "low": 4.0,
    "moderate": 10.0,
    "high": 25.0,
    "very-high": 100.0,
}
NOISE_LABELS = {
    "very-low": "Very Low",
    "low": "Low",
    "moderate": "Moderate",
    "high": "High",
    "very-high": "Very High",
}
MISSING_PERCENTS = (5, 10, 15, 20, 70)

# name -> period in days; frequencies are exact reciprocals
BAND_PERIODS = {
    "annual": Fraction(365),
    "harmonic": Fraction(365, 2),
    "monthly": Fraction(30),
}
STAGE_BANDS = {
    1: ("annual",),
    2: ("annual", "harmonic"),
    3: ("annual", "harmonic", "monthly"),
}


@dataclass(frozen=True)
class Component:
    frequency: float
    amplitude: float = DEFAULT_AMPLITUDE
    phase: float = 0.0


@dataclass(frozen=True)
class SignalSpec:
    components: tuple[Component, ...]
    n: int = DEFAULT_N
    noise_variance: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        for c in self.components:
            if not 0 < c.frequency <= 0.5:
                raise DomainError(f"frequency {c.frequency} outside (0, 0.5]")
            if c.amplitude < 0:
                raise DomainError(f"negative amplitude {c.amplitude}")
        if self.noise_variance < 0:
            raise DomainError(f"negative noise variance {self.noise_variance}")


def stage_spec(stage: int, n: int = DEFAULT_N, noise_variance: float = 0.0,
               amplitude: float = DEFAULT_AMPLITUDE,
               phases: dict[str, float] | None = None) -> SignalSpec:
    """Preset signal for complexity stage 1, 2 or 3."""
    if stage not in STAGE_BANDS:
        raise DomainError(f"stage must be 1, 2 or 3, got {stage!r}")
    phases = phases or {}
    comps = tuple(
        Component(float(1 / BAND_PERIODS[b]), amplitude, phases.get(b, 0.0))
        for b in STAGE_BANDS[stage])
    return SignalSpec(comps, n, noise_variance)


def noise_variance(tier: str) -> float:
    try:
        return NOISE_TIERS[tier]
    except KeyError:
        raise DomainError(f"unknown noise tier {tier!r}; choose from {list(NOISE_TIERS)}") from None


def generate_signal(spec: SignalSpec) -> TimeSeries:
    """Noise-free sum of sinusoids ``A sin(2 pi f t + phase)`` for t = 0..n-1."""
    if spec.n < 1:
        raise DomainError("cannot generate an empty series (n = 0)")
    t = np.arange(spec.n, dtype=float)
    values = np.zeros(spec.n)
    for c in spec.components:
        values += c.amplitude * np.sin(2 * np.pi * c.frequency * t + c.phase)
    return TimeSeries(values)


def add_noise(series: TimeSeries, variance: float, stream: np.random.Generator) -> TimeSeries:
    """Add i.i.d. N(0, variance) noise.

    Draws come from ``Generator.standard_normal`` (ziggurat on PCG64), which
    numpy guarantees to be identical across platforms for a given version.
    """
    if variance < 0:
        raise DomainError(f"negative noise variance {variance}")
    if not series.fully_observed:
        raise PreconditionError("add_noise requires a fully observed series")
    if variance == 0:
        return series
    eps = stream.standard_normal(series.n) * math.sqrt(variance)
    return TimeSeries(series.values + eps)


def missing_count(proportion: float, n: int) -> int:
    # round half up; decimal detour keeps 0.7 * 6000 from landing on 4199.999...
    exact = Fraction(str(proportion)) * n
    return int(math.floor(exact + Fraction(1, 2)))


def apply_mcar(series: TimeSeries, proportion: float, stream: np.random.Generator) -> TimeSeries:
    """Mask exactly ``round(proportion * n)`` positions chosen uniformly without replacement."""
    if not 0 <= proportion < 1:
        raise DomainError(f"missing proportion must be in [0, 1), got {proportion}")
    if not series.fully_observed:
        raise PreconditionError("apply_mcar requires a fully observed series")
    k = missing_count(proportion, series.n)
    if k == 0:
        return series
    idx = stream.choice(series.n, size=k, replace=False)
    mask = np.ones(series.n, dtype=bool)
    mask[idx] = False
    return TimeSeries(series.values, mask)
