"""Weighted back-projection of single-axis tilt series."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Grid3, bin, fourier_shift


@dataclass(frozen=True)
class ReconConfig:
    """``weighting``: "ramp" (ramp with Hann roll-off), "exact" (pure ramp)
    or "none". ``output_dims`` defaults to a cube over the binned image width.
    """

    weighting: str = "ramp"
    output_dims: tuple | None = None
    bin_factor: int = 2
    interpolation: str = "linear"
    align: bool = True

    def __post_init__(self):
        if self.weighting not in ("ramp", "exact", "none"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if int(self.bin_factor) < 1:
            raise ValueError("bin_factor must be >= 1")
        if self.interpolation != "linear":
            raise ValueError("only linear interpolation is supported")


def _ramlak(n: int) -> np.ndarray:
    """DFT of the band-limited spatial ramp kernel (Ram-Lak) on ``n`` samples.

    Unlike sampling ``|k|`` directly, this keeps the small positive DC term
    that avoids a baseline offset in the reconstruction.
    """
    h = np.zeros(n)
    h[0] = 0.25
    m = np.arange(1, n // 2 + 1)
    odd = m % 2 == 1
    h[m[odd]] = -1.0 / (np.pi * m[odd]) ** 2
    h[-m[odd]] = h[m[odd]]
    return np.fft.fft(h).real


def padded_size(n: int) -> int:
    """FFT length used for filtering rows of ``n`` pixels (>= 2n, power of two)."""
    return 1 << int(np.ceil(np.log2(2 * n)))


def weighting_filter(n: int, kind: str) -> np.ndarray:
    """1D weights over the FFT frequencies of an axis of ``n`` samples.

    "exact" is the Ram-Lak ramp, "ramp" adds a Hann roll-off reaching zero
    at Nyquist, "none" is all ones. ``n`` should be a padded length.
    """
    if kind == "none":
        return np.ones(n)
    w = _ramlak(n)
    if kind == "ramp":
        w = w * 0.5 * (1.0 + np.cos(2.0 * np.pi * np.fft.fftfreq(n)))
    return w


def _filter_x(img: np.ndarray, kind: str) -> np.ndarray:
    n = img.shape[0]
    m = padded_size(n)
    f = np.fft.fft(img, n=m, axis=0) * weighting_filter(m, kind)[:, None]
    return np.fft.ifft(f, axis=0).real[:n]


def backproject(images, angles, output_dims) -> np.ndarray:
    """Smear 2D images back along their ray directions (tilt about y).

    Image column ``x'`` receives the line integral along the beam of the
    volume rotated by the tilt, so a voxel at centred position ``(x, z)``
    reads ``x' = x cos t + z sin t``. Linear interpolation, zero outside.
    """
    nx, ny, nz = output_dims
    xs = np.arange(nx) + 0.5 - nx / 2.0
    zs = np.arange(nz) + 0.5 - nz / 2.0
    out = np.zeros((nx, ny, nz))
    for img, ang in zip(images, angles):
        img = np.asarray(img, dtype=float)
        if img.shape[1] != ny:
            raise ValueError(f"image height {img.shape[1]} does not match output {ny}")
        w_img = img.shape[0]
        t = np.deg2rad(ang)
        xp = xs[:, None] * np.cos(t) + zs[None, :] * np.sin(t) + w_img / 2.0 - 0.5  # (nx, nz)
        i0 = np.floor(xp).astype(int)
        f = xp - i0
        pad = np.vstack([np.zeros((1, ny)), img, np.zeros((1, ny))])
        a = np.clip(i0 + 1, 0, w_img + 1)
        b = np.clip(i0 + 2, 0, w_img + 1)
        va = pad[a]  # (nx, nz, ny)
        vb = pad[b]
        out += np.transpose(va * (1.0 - f)[..., None] + vb * f[..., None], (0, 2, 1))
    return out / len(angles)


def recon_geometry(image_shape, pixel_size: float, cfg: ReconConfig) -> tuple:
    """Output dims and voxel size for projections of ``image_shape``."""
    b = int(cfg.bin_factor)
    for axis, n in zip("xy", image_shape):
        if n % b:
            raise ValueError(f"image axis {axis} of size {n} is not divisible by bin factor {b}")
    nx, ny = image_shape[0] // b, image_shape[1] // b
    dims = tuple(cfg.output_dims) if cfg.output_dims else (nx, ny, nx)
    return dims, pixel_size * b


def weighted_backprojection(ts, cfg: ReconConfig | None = None) -> Grid3:
    """Reconstruct a tomogram from a :class:`~cryobench.imaging.TiltSeries`.

    Each projection is aligned by undoing its recorded shift, weighted along
    x (perpendicular to the tilt axis), binned, and back-projected.
    """
    cfg = ReconConfig() if cfg is None else cfg
    if not len(ts.projections):
        raise ValueError("empty tilt series")
    pixel = ts.projections[0].voxel_size
    recon_geometry(ts.projections[0].dims, pixel, cfg)
    images = []
    for proj, shift in zip(ts.projections, ts.shifts):
        img = np.asarray(proj.data, dtype=float)
        if cfg.align and (shift[0] or shift[1]):
            img = fourier_shift(img, (-shift[0] / pixel, -shift[1] / pixel))
        if cfg.weighting != "none":
            img = _filter_x(img, cfg.weighting)
        images.append(np.asarray(bin(Grid3(img, pixel), cfg.bin_factor).data))
    dims, voxel = recon_geometry(ts.projections[0].dims, pixel, cfg)
    return Grid3(backproject(images, ts.angles, dims), voxel)
