import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cryobench.spectral import (
    default_rings,
    estimate_snr,
    ring_index,
    ring_means,
    ring_scale,
    synthetic_reference,
)
from cryobench.volume import Grid3


def _radial_oracle(a, n_rings):
    # loop over bins one by one, independent of the vectorised bincount path
    F = np.abs(np.fft.fft2(a))
    sums = np.zeros(n_rings)
    counts = np.zeros(n_rings)
    for i, fx in enumerate(np.fft.fftfreq(a.shape[0])):
        for j, fy in enumerate(np.fft.fftfreq(a.shape[1])):
            k = min(int(np.hypot(fx, fy) * 2 * n_rings), n_rings - 1)
            sums[k] += F[i, j]
            counts[k] += 1
    return sums / counts


def test_ring_index_partitions_plane():
    idx = ring_index((32, 32), 16)
    assert idx.min() == 0 and idx.max() == 15
    assert idx[0, 0] == 0
    assert idx[16, 0] == 15  # Nyquist
    assert idx[16, 16] == 15  # corner folds into the outer ring
    with pytest.raises(ValueError):
        ring_index((8, 8), 0)


def test_ring_means_matches_loop(rng):
    a = rng.normal(size=(16, 12))
    assert np.allclose(ring_means(a, 6), _radial_oracle(a, 6), rtol=1e-12)


def test_identity_scaling(rng):
    a = rng.normal(size=(32, 32))
    out = ring_scale(Grid3(a), a)
    assert np.allclose(out.data, a, atol=1e-9)


@pytest.mark.parametrize("n_rings", [None, 5])
def test_ring_means_match_reference(rng, n_rings):
    sim = Grid3(rng.normal(size=(48, 48)))
    ref = synthetic_reference((48, 48), 0.5, seed=3)
    out = ring_scale(sim, ref, n_rings)
    nr = default_rings((48, 48)) if n_rings is None else n_rings
    assert np.allclose(ring_means(out, nr), ring_means(ref, nr), rtol=1e-6)


def test_white_noise_follows_inverse_q(rng):
    n = 64
    nr = default_rings((n, n))
    q = (np.arange(nr) + 0.5) / (2 * nr)
    target = 1.0 / q
    out = ring_scale(Grid3(rng.normal(size=(n, n))), target)
    prof = _radial_oracle(out.data, nr)
    assert np.allclose(prof * q, 1.0, rtol=1e-6)


def test_idempotent(rng):
    sim = Grid3(rng.normal(size=(32, 32)))
    ref = synthetic_reference((32, 32), 1.0, seed=1)
    once = ring_scale(sim, ref)
    twice = ring_scale(once, ref)
    assert np.allclose(once.data, twice.data, atol=1e-7)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_phase_preserved(seed):
    r = np.random.default_rng(seed)
    sim = r.normal(size=(24, 24))
    out = ring_scale(Grid3(sim), r.gamma(2.0, size=12) + 0.1)
    A, B = np.fft.fft2(sim), np.fft.fft2(out.data)
    live = np.abs(A) > 1e-12
    dphi = np.angle(B[live] / A[live])
    assert np.max(np.abs(dphi)) <= 1e-9


def test_empty_ring_passes_through(caplog):
    a = np.ones((16, 16))  # only DC carries amplitude
    with caplog.at_level(logging.WARNING, logger="cryobench.spectral"):
        out = ring_scale(Grid3(a), np.full(8, 2.0))
    assert "unscaled" in caplog.text
    assert np.allclose(out.data, out.data.mean())
    # DC ring scaled from 256 to 2
    assert out.data.mean() == pytest.approx(2.0 / 256)


def test_ring_scale_errors(rng):
    g = Grid3(rng.normal(size=(8, 8)))
    with pytest.raises(ValueError):
        ring_scale(g, np.ones(3))
    with pytest.raises(ValueError):
        ring_scale(g, np.ones((4, 4)))
    with pytest.raises(ValueError):
        ring_scale(Grid3(np.zeros((4, 4, 4))), np.ones(2))


def test_synthetic_reference_deterministic():
    a = synthetic_reference((32, 32), 0.5, seed=9)
    b = synthetic_reference((32, 32), 0.5, seed=9)
    assert np.array_equal(a.data, b.data)
    assert a.data.std() == pytest.approx(1.0)
    prof = ring_means(a)
    assert prof[1] > prof[-1]  # falls off with frequency


def test_snr_pure_noise(rng):
    t = Grid3(rng.normal(size=(40, 40, 40)))
    est = estimate_snr(t, Grid3(np.zeros((40, 40, 40))))
    assert est.snr == pytest.approx(0.0, abs=0.02)


def test_snr_constructed_variances(rng):
    n = 64
    mask = np.zeros((n, n, n), dtype=np.uint8)
    mask[:, :, 3:] = 1  # signal occupies most of the volume, as in a crowded tomogram
    t = rng.normal(size=mask.shape) + mask * rng.normal(scale=0.5, size=mask.shape)
    est = estimate_snr(Grid3(t), Grid3(mask))
    assert est.snr == pytest.approx(0.25, abs=0.05)
    assert est.var_signal == pytest.approx(est.var_noisy_signal - est.var_noise)


def test_snr_clamped(rng):
    mask = np.zeros((20, 20, 20), dtype=np.uint8)
    mask[:10] = 1
    t = rng.normal(size=mask.shape)
    t[:10] = 0.0  # quieter signal region drives signal variance negative
    est = estimate_snr(Grid3(t), Grid3(mask))
    assert est.clamped and est.snr == 0.0 and est.var_signal == 0.0


def test_snr_errors(rng):
    t = Grid3(rng.normal(size=(4, 4, 4)))
    with pytest.raises(ValueError):
        estimate_snr(t, Grid3(np.ones((4, 4, 4))))
    with pytest.raises(ValueError):
        estimate_snr(t, Grid3(np.zeros((4, 4, 5))))
