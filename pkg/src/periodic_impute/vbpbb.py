"""Phase-aligned periodic block bootstrap of a filtered component.

Blocks start at multiples of the block length ``P`` so that position ``t`` of
every replicate carries a value from source phase ``t mod P``.  Only full
blocks are sampling units; replicates are truncated to ``n``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .core import DomainError, PreconditionError, TimeSeries

DEFAULT_REPLICATES = 1000


@dataclass(frozen=True)
class VbpbbParams:
    block_length: int
    replicates: int = DEFAULT_REPLICATES

    def __post_init__(self):
        if int(self.block_length) != self.block_length or self.block_length < 1:
            raise DomainError(f"block_length must be a positive integer, got {self.block_length}")
        if int(self.replicates) != self.replicates or self.replicates < 1:
            raise DomainError(f"replicates must be a positive integer, got {self.replicates}")


@dataclass(frozen=True, eq=False)
class PeriodicCovariate:
    frequency: float
    component: TimeSeries
    covariate: TimeSeries
    block_length: int
    tail: int
    replicates: int


def block_length_for(period) -> int:
    """Smallest integer multiple of ``period`` (days).

    >>> block_length_for(Fraction(365, 2))
    365
    >>> block_length_for(30)
    30
    """
    p = Fraction(period) if not isinstance(period, float) \
        else Fraction(period).limit_denominator(10_000)
    if p <= 0:
        raise DomainError(f"period must be positive, got {period}")
    return p.numerator


def partition_blocks(component: TimeSeries, block_length: int) -> tuple[np.ndarray, int]:
    """Split into ``n // P`` consecutive full blocks (a read-only view) and the tail length."""
    if not component.fully_observed:
        raise PreconditionError("block partitioning requires a fully observed component")
    n, P = component.n, int(block_length)
    if P < 1 or P > n:
        raise DomainError(f"block length {P} must lie in [1, n={n}]")
    nb = n // P
    return component.values[: nb * P].reshape(nb, P), n - nb * P


def _slots(n: int, P: int) -> int:
    return math.ceil(n / P)


def bootstrap_replicate(blocks: np.ndarray, n: int, stream: np.random.Generator) -> TimeSeries:
    """Concatenate uniformly drawn blocks until length >= n, then truncate."""
    blocks = np.asarray(blocks)
    if blocks.ndim != 2 or blocks.shape[0] == 0:
        raise DomainError("bootstrap needs at least one full block")
    nb, P = blocks.shape
    draws = stream.integers(0, nb, size=_slots(n, P))
    return TimeSeries(blocks[draws].reshape(-1)[:n])


def _draw_indices(nb: int, nslots: int, R: int, stream: np.random.Generator) -> np.ndarray:
    return stream.integers(0, nb, size=(R, nslots))


def vbpbb_replicates(component: TimeSeries, params: VbpbbParams,
                     stream: np.random.Generator) -> np.ndarray:
    """All ``R`` replicates as an ``(R, n)`` array.

    Consumes ``stream`` exactly as :func:`vbpbb_covariate` does, so the
    pointwise median of this array equals that function's covariate.
    """
    blocks, _ = partition_blocks(component, params.block_length)
    nb, P = blocks.shape
    n = component.n
    idx = _draw_indices(nb, _slots(n, P), params.replicates, stream)
    return blocks[idx].reshape(params.replicates, -1)[:, :n]


def _pointwise_median(blocks: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    # replicate r at slot j, phase q holds blocks[idx[r, j], q]; the median over r
    # is a weighted median of the nb candidate values with weights = draw counts
    nb, P = blocks.shape
    R, nslots = idx.shape
    counts = np.bincount((idx + nb * np.arange(nslots)).ravel(),
                         minlength=nslots * nb).reshape(nslots, nb)
    order = np.argsort(blocks, axis=0, kind="stable")
    sorted_vals = np.take_along_axis(blocks, order, axis=0)
    cum = np.cumsum(counts[:, order], axis=1)  # (nslots, nb, P)
    lo_k, hi_k = (R - 1) // 2, R // 2
    phase = np.arange(P)
    lo = sorted_vals[(cum <= lo_k).sum(axis=1), phase]
    if lo_k == hi_k:
        med = lo
    else:
        hi = sorted_vals[(cum <= hi_k).sum(axis=1), phase]
        med = (lo + hi) / 2
    return med.reshape(-1)[:n]


def vbpbb_covariate(component: TimeSeries, params: VbpbbParams,
                    stream: np.random.Generator, frequency: float | None = None) -> PeriodicCovariate:
    """Pointwise median over ``R`` phase-aligned block-bootstrap replicates."""
    blocks, tail = partition_blocks(component, params.block_length)
    nb, P = blocks.shape
    n = component.n
    idx = _draw_indices(nb, _slots(n, P), params.replicates, stream)
    med = _pointwise_median(blocks, idx, n)
    if frequency is None:
        frequency = 1.0 / P
    return PeriodicCovariate(float(frequency), component, TimeSeries(med),
                             P, tail, params.replicates)
