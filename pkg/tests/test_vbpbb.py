import numpy as np
import pytest
from fractions import Fraction

from periodic_impute.core import DomainError, SeedSpec, TimeSeries, derive_stream
from periodic_impute.kzft import KzftParams, bandpass_component
from periodic_impute.simulate import add_noise
from periodic_impute.vbpbb import (VbpbbParams, block_length_for, bootstrap_replicate,
                                   partition_blocks, vbpbb_covariate, vbpbb_replicates)


def stream(i=0):
    return derive_stream(SeedSpec(5, (("vbpbb-test", i),)))


@pytest.mark.parametrize("n,P,nb,tail", [(6000, 365, 16, 160), (6000, 30, 200, 0), (365, 365, 1, 0)])
def test_partition(n, P, nb, tail):
    blocks, t = partition_blocks(TimeSeries(np.arange(n, dtype=float)), P)
    assert blocks.shape == (nb, P)
    assert t == tail
    assert np.array_equal(blocks[:, 0], np.arange(nb) * P)


def test_partition_block_too_long():
    with pytest.raises(DomainError):
        partition_blocks(TimeSeries(np.zeros(10)), 11)


def test_block_length_rule():
    assert block_length_for(365) == 365
    assert block_length_for(Fraction(365, 2)) == 365
    assert block_length_for(182.5) == 365
    assert block_length_for(30) == 30


def test_single_block_replicate_is_periodic_extension():
    comp = TimeSeries(np.sin(np.arange(365) / 7.0))
    blocks, _ = partition_blocks(comp, 365)
    rep = bootstrap_replicate(blocks, 1000, stream())
    assert np.array_equal(rep.values, np.resize(comp.values, 1000))


def test_annual_replicate_draws_and_phase():
    x = np.arange(6000, dtype=float)
    blocks, _ = partition_blocks(TimeSeries(x), 365)
    g = stream(1)
    rep = bootstrap_replicate(blocks, 6000, g).values
    assert rep.size == 6000
    # values encode their source position, so phase is checkable exactly
    assert np.array_equal(rep.astype(int) % 365, np.arange(6000) % 365)
    starts = rep[::365].astype(int)
    assert starts.size == 17
    assert np.all(starts % 365 == 0) and np.all(starts < 16 * 365)


def test_zero_blocks_rejected():
    with pytest.raises(DomainError):
        bootstrap_replicate(np.empty((0, 5)), 10, stream())


def test_replicates_preserve_phase():
    x = np.arange(6000, dtype=float)
    reps = vbpbb_replicates(TimeSeries(x), VbpbbParams(365, 50), stream(2))
    assert reps.shape == (50, 6000)
    assert np.array_equal(reps.astype(int) % 365, np.broadcast_to(np.arange(6000) % 365, reps.shape))
    assert reps.max() < 16 * 365  # tail is never sampled


def test_replicate_rows_match_sequential_draws():
    comp = TimeSeries(np.random.default_rng(0).normal(size=1000))
    reps = vbpbb_replicates(comp, VbpbbParams(30, 4), stream(3))
    blocks, _ = partition_blocks(comp, 30)
    g = stream(3)
    for r in range(4):
        assert np.array_equal(reps[r], bootstrap_replicate(blocks, 1000, g).values)


@pytest.mark.parametrize("R", [1, 2, 7, 100, 1000])
@pytest.mark.parametrize("P", [30, 365])
def test_covariate_equals_brute_force_median(R, P):
    comp = TimeSeries(np.random.default_rng(R + P).normal(size=6000))
    cov = vbpbb_covariate(comp, VbpbbParams(P, R), stream(4))
    reps = vbpbb_replicates(comp, VbpbbParams(P, R), stream(4))
    assert np.array_equal(cov.covariate.values, np.median(reps, axis=0))


def test_single_replicate_covariate():
    comp = TimeSeries(np.random.default_rng(1).normal(size=800))
    cov = vbpbb_covariate(comp, VbpbbParams(30, 1), stream(5))
    rep = vbpbb_replicates(comp, VbpbbParams(30, 1), stream(5))[0]
    assert np.array_equal(cov.covariate.values, rep)


def test_identical_blocks_reproduce_component_exactly():
    # tile one cycle so every block is bit-identical
    comp = TimeSeries(np.tile(10 * np.sin(2 * np.pi * np.arange(30) / 30), 200))
    cov = vbpbb_covariate(comp, VbpbbParams(30, 1000), stream(6))
    assert np.array_equal(cov.covariate.values, comp.values)
    assert cov.tail == 0


def test_covariate_tracks_true_annual_cycle():
    t = np.arange(6000)
    truth = 10 * np.sin(2 * np.pi * t / 365)
    noisy = add_noise(TimeSeries(truth), 4.0, stream(7))
    p = KzftParams(1 / 365, 731, 3)
    comp = bandpass_component(noisy, p)
    cov = vbpbb_covariate(comp, VbpbbParams(365, 1000), stream(8))
    h = (p.support - 1) // 2
    sl = slice(h, 6000 - h)
    assert np.sqrt(np.mean((cov.covariate.values[sl] - truth[sl]) ** 2)) <= 0.5


def test_median_is_stable_in_R():
    t = np.arange(6000)
    noisy = add_noise(TimeSeries(10 * np.sin(2 * np.pi * t / 365)), 4.0, stream(9))
    comp = bandpass_component(noisy, KzftParams(1 / 365, 731, 3))
    c500 = vbpbb_covariate(comp, VbpbbParams(365, 500), stream(10)).covariate.values
    c1000 = vbpbb_covariate(comp, VbpbbParams(365, 1000), stream(11)).covariate.values
    rms = np.sqrt(np.mean(comp.values ** 2))
    assert np.sqrt(np.mean((c500 - c1000) ** 2)) < 0.05 * rms


def test_deterministic():
    comp = TimeSeries(np.random.default_rng(2).normal(size=2000))
    a = vbpbb_covariate(comp, VbpbbParams(365, 200), stream(12)).covariate.values
    b = vbpbb_covariate(comp, VbpbbParams(365, 200), stream(12)).covariate.values
    assert np.array_equal(a, b)


def test_params_validation():
    with pytest.raises(DomainError):
        VbpbbParams(0)
    with pytest.raises(DomainError):
        VbpbbParams(10, 0)
