"""Fourier-ring amplitude matching and SNR estimation."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .volume import Grid3

log = logging.getLogger(__name__)


def default_rings(shape) -> int:
    """One-pixel-wide rings up to Nyquist."""
    return max(1, min(shape) // 2)


def ring_index(shape, n_rings: int) -> np.ndarray:
    """Ring label of every FFT bin; the rings partition the whole plane.

    Ring ``i`` holds radii in ``[i, i + 1) * 0.5 / n_rings`` cycles/pixel; the
    corner bins beyond Nyquist join the outermost ring.
    """
    if n_rings < 1:
        raise ValueError("n_rings must be >= 1")
    fx = np.fft.fftfreq(shape[0])[:, None]
    fy = np.fft.fftfreq(shape[1])[None, :]
    r = np.sqrt(fx**2 + fy**2)
    return np.minimum(np.floor(r / 0.5 * n_rings).astype(int), n_rings - 1)


def ring_means(image, n_rings: int | None = None) -> np.ndarray:
    """Mean Fourier amplitude per ring."""
    a = np.asarray(getattr(image, "data", image), dtype=float)
    n_rings = default_rings(a.shape) if n_rings is None else n_rings
    idx = ring_index(a.shape, n_rings).ravel()
    amp = np.abs(np.fft.fft2(a)).ravel()
    counts = np.bincount(idx, minlength=n_rings)
    return np.bincount(idx, weights=amp, minlength=n_rings) / np.maximum(counts, 1)


@dataclass(frozen=True)
class RingScaling:
    n_rings: int
    mu_sim: np.ndarray
    mu_exp: np.ndarray

    @property
    def factors(self) -> np.ndarray:
        ok = self.mu_sim > 0
        return np.where(ok, self.mu_exp / np.where(ok, self.mu_sim, 1.0), 1.0)


def ring_scale(sim: Grid3, reference, n_rings: int | None = None) -> Grid3:
    """Scale the amplitudes of ``sim`` ring by ring to a reference.

    ``reference`` is either a 2D image of the same shape or a 1D array of
    per-ring mean amplitudes. Phases are untouched. Rings with zero mean
    amplitude in ``sim`` are passed through unscaled.
    """
    a = np.asarray(sim.data, dtype=float)
    if a.ndim != 2:
        raise ValueError("ring_scale works on 2D images")
    n_rings = default_rings(a.shape) if n_rings is None else int(n_rings)
    ref = np.asarray(getattr(reference, "data", reference), dtype=float)
    if ref.ndim == 1:
        if len(ref) != n_rings:
            raise ValueError(f"radial profile has {len(ref)} rings, expected {n_rings}")
        mu_exp = ref
    else:
        if ref.shape != a.shape:
            raise ValueError(f"reference shape {ref.shape} differs from {a.shape}")
        mu_exp = ring_means(ref, n_rings)
    mu_sim = ring_means(a, n_rings)
    rs = RingScaling(n_rings, mu_sim, mu_exp)
    empty = np.flatnonzero(mu_sim <= 0)
    if len(empty):
        log.warning("%d rings with zero simulated amplitude passed through unscaled", len(empty))
    F = np.fft.fft2(a) * rs.factors[ring_index(a.shape, n_rings)]
    out = np.fft.ifft2(F)
    return sim.replace(out.real.copy())


def synthetic_reference(
    shape,
    pixel_size: float,
    seed: int = 0,
    exponent: float = 1.0,
    defocus: float = 3500.0,
    thon_depth: float = 0.5,
    noise_floor: float = 0.2,
    scale: float = 1.0,
) -> Grid3:
    """Stand-in for an experimental image: power-law amplitude falloff
    ``q^-exponent`` modulated by Thon rings of the given defocus (nm), over a
    white noise floor, with random phases."""
    from . import rng as rngs
    from .imaging import OpticsConfig, chi

    optics = OpticsConfig(defocus=defocus, pixel_size=pixel_size)
    fx = np.fft.fftfreq(shape[0], d=pixel_size)[:, None]
    fy = np.fft.fftfreq(shape[1], d=pixel_size)[None, :]
    q = np.sqrt(fx**2 + fy**2)
    q0 = 1.0 / (shape[0] * pixel_size)
    amp = (np.maximum(q, q0) / q0) ** (-exponent)
    amp = amp * (1.0 - thon_depth + thon_depth * np.abs(np.sin(chi(q, optics)))) + noise_floor * amp.min()
    r = rngs.generator(seed, "reference")
    phase = np.fft.fft2(r.normal(size=shape))
    img = np.fft.ifft2(amp * phase / np.maximum(np.abs(phase), 1e-12)).real
    return Grid3(scale * img / img.std(), pixel_size)


@dataclass(frozen=True)
class SnrEstimate:
    var_noise: float
    var_noisy_signal: float
    var_signal: float
    snr: float
    clamped: bool = False


def estimate_snr(tomogram: Grid3, occupancy_mask: Grid3) -> SnrEstimate:
    """SNR as signal variance over noise variance.

    Noise variance comes from background voxels (mask == 0) and noisy-signal
    variance from the whole volume, so every class (gold included)
    contributes. Negative signal variance is clamped to zero and flagged.
    """
    t = np.asarray(tomogram.data, dtype=float)
    m = np.asarray(occupancy_mask.data)
    if t.shape != m.shape:
        raise ValueError(f"mask shape {m.shape} does not match tomogram {t.shape}")
    bg = m == 0
    if not bg.any():
        raise ValueError("occupancy mask leaves no background voxels")
    var_noise = float(t[bg].var())
    var_ns = float(t.var())
    var_sig = var_ns - var_noise
    clamped = var_sig < 0
    if clamped:
        log.warning("negative signal variance %.3g clamped to zero", var_sig)
        var_sig = 0.0
    snr = var_sig / var_noise if var_noise > 0 else 0.0
    return SnrEstimate(var_noise, var_ns, var_sig, snr, clamped)
