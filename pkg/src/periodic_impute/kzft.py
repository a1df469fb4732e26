"""Kolmogorov-Zurbenko Fourier transform bandpass filtering.

The KZ kernel is the k-fold self-convolution of a width-m uniform window.
Demodulating it at frequency ``nu`` turns the low-pass smoother into a
bandpass centred on ``nu``.  Edges use the truncated kernel renormalised to
unit mass, so output length always equals input length.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core import DomainError, PreconditionError, TimeSeries


@dataclass(frozen=True)
class KzftParams:
    nu: float
    m: int
    k: int = 3

    def __post_init__(self):
        if not 0 < self.nu <= 0.5:
            raise DomainError(f"nu={self.nu} outside (0, 0.5]")
        if self.m < 3 or self.m % 2 == 0:
            raise DomainError(f"window width m={self.m} must be odd and >= 3")
        if self.k < 1:
            raise DomainError(f"iteration count k={self.k} must be >= 1")

    @property
    def support(self) -> int:
        return self.k * (self.m - 1) + 1


@lru_cache(maxsize=32)
def _kz_weights(m: int, k: int) -> np.ndarray:
    box = np.full(m, 1.0 / m)
    w = np.ones(1)
    for _ in range(k):
        w = np.convolve(w, box)
    w = 0.5 * (w + w[::-1])  # exact symmetry
    w /= w.sum()
    w.setflags(write=False)
    return w


def kz_coefficients(m: int, k: int) -> np.ndarray:
    """Weights a_s for s = -k(m-1)/2 .. k(m-1)/2 of the iterated moving average."""
    if m % 2 == 0:
        raise DomainError(f"window width m={m} must be odd")
    if m < 3:
        raise DomainError(f"window width m={m} must be >= 3")
    if k < 1:
        raise DomainError(f"iteration count k={k} must be >= 1")
    return _kz_weights(int(m), int(k)).copy()


def transfer(params: KzftParams, freq) -> np.ndarray:
    """Complex response sum_s a_s exp(-i 2 pi (freq - nu) s) of the demodulated kernel."""
    a = _kz_weights(params.m, params.k)
    h = (a.size - 1) // 2
    s = np.arange(-h, h + 1)
    freq = np.atleast_1d(np.asarray(freq, dtype=float))
    return np.exp(-2j * np.pi * np.outer(freq - params.nu, s)) @ a


def _check(series: TimeSeries, params: KzftParams) -> np.ndarray:
    if not series.fully_observed:
        raise PreconditionError(
            "KZFT filtering requires a fully observed series "
            f"({(~series.mask).sum()} missing values)")
    if params.support > series.n:
        raise PreconditionError(
            f"filter support {params.support} exceeds series length {series.n}")
    return series.values


@lru_cache(maxsize=32)
def _edge_mass(n: int, m: int, k: int) -> np.ndarray:
    a = _kz_weights(m, k)
    mass = np.convolve(np.ones(n), a, mode="same")
    mass.setflags(write=False)
    return mass


def _correlate(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # out[t] = sum_s w_s x[t+s], centred ('same' on an odd-length kernel)
    return np.convolve(x, w[::-1], mode="same")


def kzft_transform(series: TimeSeries, params: KzftParams) -> np.ndarray:
    """Complex KZFT: ``out[t] = sum_s a_s x[t+s] exp(-i 2 pi nu s)``.

    A pass-band input ``cos(2 pi nu t)`` maps to roughly ``0.5 exp(i 2 pi nu t)``.
    """
    x = _check(series, params)
    a = _kz_weights(params.m, params.k)
    h = (a.size - 1) // 2
    s = np.arange(-h, h + 1)
    phase = 2 * np.pi * params.nu * s
    re = _correlate(x, a * np.cos(phase))
    im = _correlate(x, -a * np.sin(phase))
    mass = _edge_mass(x.size, params.m, params.k)
    return (re + 1j * im) / mass


def bandpass_component(series: TimeSeries, params: KzftParams) -> TimeSeries:
    """Real periodic component at ``nu``: twice the real part of the KZFT.

    Equivalent to filtering with the symmetric real kernel ``2 a_s cos(2 pi nu s)``,
    hence zero phase shift.
    """
    x = _check(series, params)
    a = _kz_weights(params.m, params.k)
    h = (a.size - 1) // 2
    s = np.arange(-h, h + 1)
    kernel = 2.0 * a * np.cos(2 * np.pi * params.nu * s)
    comp = _correlate(x, kernel) / _edge_mass(x.size, params.m, params.k)
    return TimeSeries(comp)
