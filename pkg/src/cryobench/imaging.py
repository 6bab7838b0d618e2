"""Tilt-series simulation: multislice propagation, CTF, detector and dose.

Units: nm for lengths, V for potentials and voltage, eV for energy spread,
rad for angles inside formulas. Spatial frequencies are in cycles / nm.

Conventions
-----------
* Free-space propagation over a distance ``dz`` multiplies the spectrum by
  ``exp(-i pi lambda dz q^2)``.
* The objective lens multiplies the spectrum by ``exp(i chi(q))`` with
  ``chi(q) = pi lambda df q^2 - pi/2 Cs lambda^3 q^4`` and ``df > 0`` meaning
  underfocus. A weak phase object ``phi`` then images as
  ``1 - 2 F^-1[sin(chi) F[phi]]`` (dense material appears dark).
* Defocus is measured from the central plane of the specimen box.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import ndimage

from . import rng as rngs
from .datafiles import read_table
from .structchem import ICE_ABSORPTION, ICE_POTENTIAL, PotentialMap
from .volume import ComplexGrid3, Grid3, fourier_shift, frequency_grid, rotate_bspline

log = logging.getLogger(__name__)

# physical constants (CODATA)
_H = 6.62607015e-34
_M0 = 9.1093837015e-31
_E = 1.602176634e-19
_C = 299792458.0
_M0C2_EV = _M0 * _C**2 / _E

# Inelastic mean free path of amorphous ice at 300 kV; fixes the scale of the
# dimensionless absorption potential (ice = 0.208).
ICE_INELASTIC_MFP = 350.0  # nm


@dataclass(frozen=True)
class OpticsConfig:
    voltage: float = 300e3  # V
    spherical_aberration: float = 2.7e6  # nm (2.7 mm)
    chromatic_aberration: float = 2.7e6  # nm (2.7 mm)
    energy_spread: float = 0.7  # eV, FWHM
    illumination_aperture: float = 30e-6  # rad, illumination semi-angle
    objective_diameter: float = 100e3  # nm (100 um)
    focal_distance: float = 4.7e6  # nm (4.7 mm)
    defocus: float = 3500.0  # nm, positive = underfocus
    astigmatism: float = 0.0  # nm
    astigmatism_angle: float = 0.0  # deg
    slice_thickness: float = 5.0  # nm
    pixel_size: float = 0.5  # nm

    def __post_init__(self):
        for name in (
            "voltage", "spherical_aberration", "chromatic_aberration", "energy_spread",
            "illumination_aperture", "objective_diameter", "focal_distance", "defocus",
            "slice_thickness", "pixel_size",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"optics parameter {name} must be positive")

    @property
    def wavelength(self) -> float:
        """Relativistic electron wavelength in nm."""
        return electron_wavelength(self.voltage)

    @property
    def interaction_constant(self) -> float:
        """Phase shift per unit projected potential, rad / (V nm)."""
        return interaction_constant(self.voltage)

    @property
    def absorption_constant(self) -> float:
        """Amplitude attenuation per unit projected absorption potential, 1/nm."""
        return 1.0 / (2.0 * ICE_ABSORPTION * ICE_INELASTIC_MFP)


def electron_wavelength(voltage: float) -> float:
    ev = _E * voltage
    lam = _H / math.sqrt(2.0 * _M0 * ev * (1.0 + ev / (2.0 * _M0 * _C**2)))
    return lam * 1e9


def interaction_constant(voltage: float) -> float:
    # sigma = 2 pi / (lambda V) * (m0 c^2 + eV) / (2 m0 c^2 + eV)
    lam = electron_wavelength(voltage)
    return 2.0 * math.pi / (lam * voltage) * (_M0C2_EV + voltage) / (2.0 * _M0C2_EV + voltage)


# ---------------------------------------------------------------------------
# contrast transfer


def chi(q, optics: OpticsConfig, defocus: float | None = None, azimuth=None) -> np.ndarray:
    """Aberration phase ``pi lam df q^2 - pi/2 Cs lam^3 q^4``."""
    q = np.asarray(q, dtype=float)
    lam = optics.wavelength
    df = optics.defocus if defocus is None else defocus
    if optics.astigmatism and azimuth is not None:
        df = df + 0.5 * optics.astigmatism * np.cos(2.0 * (azimuth - np.deg2rad(optics.astigmatism_angle)))
    return np.pi * lam * df * q**2 - 0.5 * np.pi * optics.spherical_aberration * lam**3 * q**4


def temporal_envelope(q, optics: OpticsConfig) -> np.ndarray:
    """Partial temporal coherence from the source energy spread (FWHM).

    ``E_t = exp(-(pi lam delta q^2)^2 / (16 ln 2))`` with focal spread
    ``delta = Cc (dE / V) (1 + eV/m0c^2) / (1 + eV/2m0c^2)``.
    """
    q = np.asarray(q, dtype=float)
    v = optics.voltage
    rel = (1.0 + v / _M0C2_EV) / (1.0 + v / (2.0 * _M0C2_EV))
    delta = optics.chromatic_aberration * optics.energy_spread / v * rel
    return np.exp(-((np.pi * optics.wavelength * delta * q**2) ** 2) / (16.0 * math.log(2.0)))


def spatial_envelope(q, optics: OpticsConfig, defocus: float | None = None) -> np.ndarray:
    """Partial spatial coherence, ``exp(-(pi alpha)^2 (df q - Cs lam^2 q^3)^2)``."""
    q = np.asarray(q, dtype=float)
    df = optics.defocus if defocus is None else defocus
    lam = optics.wavelength
    grad = df * q - optics.spherical_aberration * lam**2 * q**3
    return np.exp(-((np.pi * optics.illumination_aperture) ** 2) * grad**2)


def aperture_cutoff(optics: OpticsConfig) -> float:
    """Objective aperture radius in frequency space (cycles / nm)."""
    return optics.objective_diameter / (2.0 * optics.focal_distance * optics.wavelength)


def phase_ctf(q, optics: OpticsConfig, defocus: float | None = None, envelopes: bool = True) -> np.ndarray:
    """Real phase-contrast transfer ``-sin(chi) * E_t * E_s``."""
    out = -np.sin(chi(q, optics, defocus))
    if envelopes:
        out = out * temporal_envelope(q, optics) * spatial_envelope(q, optics, defocus)
    return out


def ctf(shape, optics: OpticsConfig, defocus: float | None = None, envelopes: bool = True, aperture: bool = True) -> ComplexGrid3:
    """2D complex wave transfer ``exp(i chi) E_t E_s A`` on an FFT grid."""
    fx, fy = frequency_grid(shape, optics.pixel_size)
    q = np.sqrt(fx**2 + fy**2)
    az = np.arctan2(fy, fx)
    h = np.exp(1j * chi(q, optics, defocus, az))
    if envelopes:
        h = h * temporal_envelope(q, optics) * spatial_envelope(q, optics, defocus)
    if aperture:
        h = h * (q <= aperture_cutoff(optics))
    return ComplexGrid3(np.broadcast_to(h, shape).copy(), optics.pixel_size)


# ---------------------------------------------------------------------------
# multislice


def tilt_matrix(angle_deg: float) -> np.ndarray:
    """Rotation about the y (tilt) axis; a point at x moves towards -z."""
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def propagator(shape, pixel_size: float, wavelength: float, distance: float) -> np.ndarray:
    fx, fy = frequency_grid(shape, pixel_size)
    return np.exp(-1j * np.pi * wavelength * distance * (fx**2 + fy**2))


class TiltRotator:
    """Cubic B-spline rotation about the y axis with the spline coefficients
    computed once, for rotating the same volume to many tilt angles.

    Matches :func:`~cryobench.volume.rotate_bspline` about the grid centre.
    """

    PAD = 12  # constant-fill margin before prefiltering

    def __init__(self, grid: Grid3, fill: float = 0.0):
        a = np.asarray(grid.data, dtype=np.float64)
        if a.ndim != 3:
            raise ValueError("TiltRotator expects a 3D grid")
        if not np.all(np.isfinite(a)):
            raise ValueError("input grid contains non-finite values")
        p = self.PAD
        c = np.pad(a, ((p, p), (0, 0), (p, p)), constant_values=fill)
        c = ndimage.spline_filter1d(c, 3, axis=0, mode="grid-constant")
        c = ndimage.spline_filter1d(c, 3, axis=2, mode="grid-constant")
        self.coeff = np.ascontiguousarray(np.moveaxis(c, 1, 0))
        self.shape = a.shape
        self.fill = float(fill)
        self.dtype = np.float32 if grid.data.dtype == np.float32 else np.float64
        self.grid = grid

    def rotate(self, angle: float) -> np.ndarray:
        if angle == 0:
            return np.array(self.grid.data, dtype=self.dtype)
        nx, ny, nz = self.shape
        Rt = tilt_matrix(angle).T
        M = Rt[np.ix_([0, 2], [0, 2])]
        c = (np.array([nx, nz]) - 1) / 2.0
        off = c - M @ c + self.PAD
        out = np.empty((ny, nx, nz), dtype=self.dtype)
        for s in range(ny):
            ndimage.affine_transform(self.coeff[s], M, offset=off, output_shape=(nx, nz), order=3, prefilter=False, mode="grid-constant", cval=self.fill, output=out[s])
        return np.moveaxis(out, 0, 1)


def _as_potential(model) -> PotentialMap:
    return model.potential if hasattr(model, "potential") else model


def slice_projections(v: np.ndarray, voxel_size: float, slice_thickness: float) -> list:
    """Projected potential (value * nm) of consecutive slabs along z."""
    per = slice_thickness / voxel_size
    if abs(per - round(per)) > 1e-6 or round(per) < 1:
        raise ValueError(f"slice thickness {slice_thickness} nm is not a multiple of the voxel size {voxel_size} nm")
    per = int(round(per))
    nz = v.shape[2]
    return [v[:, :, k : k + per].sum(axis=2, dtype=np.float64) * voxel_size for k in range(0, nz, per)]


def multislice_project(
    model,
    angle: float,
    optics: OpticsConfig,
    apply_ctf: bool = True,
    envelopes: bool = True,
    aperture: bool = True,
    rotators: tuple | None = None,
) -> ComplexGrid3:
    """Image-plane wave of a potential (or grandmodel) tilted by ``angle``.

    The potential is rotated about the tilt axis with cubic B-spline
    interpolation (clipped corners filled with the ice background), cut into
    slabs of ``optics.slice_thickness`` along the beam, and the wave is
    alternately transmitted and propagated through them. The exit wave is
    brought to the image plane by the CTF. ``rotators`` optionally holds
    prepared :class:`TiltRotator` objects for ``(v_el, v_ab)``.
    """
    pm = _as_potential(model)
    vs = pm.voxel_size
    if abs(vs - optics.pixel_size) > 1e-9:
        raise ValueError(f"potential sampled at {vs} nm but optics pixel size is {optics.pixel_size} nm")
    R = tilt_matrix(angle)
    ice = (ICE_POTENTIAL, ICE_ABSORPTION) if pm.kind == "grandmodel" else (0.0, 0.0)
    if rotators is None:
        v_el = rotate_bspline(pm.v_el, R, fill=ice[0]).data
        v_ab = rotate_bspline(pm.v_ab, R, fill=ice[1]).data
    else:
        v_el, v_ab = rotators[0].rotate(angle), rotators[1].rotate(angle)
    el_slices = slice_projections(v_el, vs, optics.slice_thickness)
    ab_slices = slice_projections(v_ab, vs, optics.slice_thickness)
    shape2 = v_el.shape[:2]
    lam = optics.wavelength
    sig_e = optics.interaction_constant
    sig_a = optics.absorption_constant
    thickness = v_el.shape[2] * vs
    per = int(round(optics.slice_thickness / vs))
    wave = np.ones(shape2, dtype=np.complex128)
    for k, (pe, pa) in enumerate(zip(el_slices, ab_slices)):
        dz = min(per, v_el.shape[2] - k * per) * vs
        wave = wave * np.exp(1j * sig_e * pe - sig_a * pa)
        wave = np.fft.ifft2(np.fft.fft2(wave) * propagator(shape2, vs, lam, dz))
    if apply_ctf:
        h = ctf(shape2, optics, optics.defocus + 0.5 * thickness, envelopes, aperture).data
        wave = np.fft.ifft2(np.fft.fft2(wave) * h)
    return ComplexGrid3(wave, vs)


def geometric_projection(volume: Grid3, angle: float, fill: float = 0.0) -> Grid3:
    """Noiseless line integral along the beam of a volume tilted by ``angle``."""
    rot = rotate_bspline(volume, tilt_matrix(angle), fill=fill)
    return Grid3(np.asarray(rot.data, dtype=float).sum(axis=2) * volume.voxel_size, volume.voxel_size)


def geometric_tiltseries(volume: Grid3, angles, optics: OpticsConfig | None = None) -> TiltSeries:
    """Tilt series of ray sums with no shifts, noise or optics effects."""
    optics = optics or OpticsConfig(pixel_size=volume.voxel_size)
    projs = [geometric_projection(volume, a) for a in angles]
    n = len(projs)
    return TiltSeries(projs, [float(a) for a in angles], [(0.0, 0.0)] * n, [0.0] * n, optics)


# ---------------------------------------------------------------------------
# detector


@dataclass(frozen=True)
class DqeCurve:
    """DQE sampled against frequency as a fraction of Nyquist."""

    frequency: tuple
    dqe: tuple

    def __call__(self, f_nyq) -> np.ndarray:
        return np.interp(f_nyq, self.frequency, self.dqe)

    def transfer(self, shape) -> np.ndarray:
        """Amplitude filter ``sqrt(DQE(q) / DQE(0))`` on an FFT grid."""
        fx, fy = frequency_grid(shape, 1.0)
        f = np.sqrt(fx**2 + fy**2) / 0.5
        return np.sqrt(self(f) / self.dqe[0])


@lru_cache(maxsize=None)
def load_dqe() -> DqeCurve:
    rows = read_table("k2_dqe.txt")
    return DqeCurve(tuple(float(r[0]) for r in rows), tuple(float(r[1]) for r in rows))


def detect(
    exit_wave: ComplexGrid3 | Grid3,
    dose_per_pixel: float,
    dqe_curve: DqeCurve | None,
    rng: np.random.Generator,
    shift=(0.0, 0.0),
    stats: dict | None = None,
) -> Grid3:
    """Electron counts for an image-plane wave (or a ready intensity image).

    The intensity is DQE-filtered, optionally translated by ``shift``
    (pixels), scaled to ``dose_per_pixel`` expected electrons at unit
    intensity and Poisson sampled. Negative expectations after filtering are
    clamped to zero and counted in ``stats["clamped"]``.
    """
    if dose_per_pixel < 0:
        raise ValueError("dose must be non-negative")
    d = np.asarray(exit_wave.data)
    intensity = np.abs(d) ** 2 if np.iscomplexobj(d) else d.astype(float)
    if dqe_curve is not None:
        intensity = np.fft.ifft2(np.fft.fft2(intensity) * dqe_curve.transfer(intensity.shape)).real
    if shift[0] or shift[1]:
        intensity = fourier_shift(intensity, shift)
    expected = intensity * dose_per_pixel
    neg = int((expected < 0).sum())
    if neg:
        log.warning("clamped %d negative expected counts to zero", neg)
        expected = np.clip(expected, 0.0, None)
    if stats is not None:
        stats["clamped"] = stats.get("clamped", 0) + neg
    counts = rng.poisson(expected).astype(np.float64)
    return Grid3(counts, exit_wave.voxel_size)


# ---------------------------------------------------------------------------
# tilt series


@dataclass(frozen=True)
class TiltConfig:
    """Acquisition scheme; dose in e-/A^2, lengths in nm."""

    min_angle: float = -60.0
    max_angle: float = 60.0
    n_tilts: int = 61
    defocus_range: tuple = (2000.0, 5000.0)
    dose_range: tuple = (100.0, 120.0)
    shift_half_range: float = 0.5
    use_dqe: bool = True

    def angles(self) -> list:
        return [float(a) for a in np.linspace(self.min_angle, self.max_angle, self.n_tilts)]


@dataclass
class TiltSeries:
    projections: list  # Grid3, 2D counts
    angles: list  # deg
    shifts: list  # (dx, dy) nm applied to each image
    per_tilt_dose: list  # e-/A^2
    optics: OpticsConfig
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.projections) == len(self.angles) == len(self.shifts) == len(self.per_tilt_dose)):
            raise ValueError("tilt series fields differ in length")

    @property
    def total_dose(self) -> float:
        return float(sum(self.per_tilt_dose))

    @property
    def pixel_size(self) -> float:
        return self.projections[0].voxel_size

    def sidecar(self) -> dict:
        return {
            "angles": list(self.angles),
            "shifts": [list(s) for s in self.shifts],
            "per_tilt_dose": list(self.per_tilt_dose),
            "total_dose": self.total_dose,
            "pixel_size": self.pixel_size,
            "seed": self.seed,
            "optics": asdict(self.optics),
            **self.metadata,
        }


@dataclass(frozen=True)
class Acquisition:
    defocus: float  # nm
    total_dose: float  # e-/A^2
    angles: list
    shifts: list  # (dx, dy) nm
    per_tilt_dose: list


def draw_acquisition(seed: int, config: TiltConfig) -> Acquisition:
    """Per-model defocus and dose and per-tilt shifts from the tilt-series stream."""
    r = rngs.generator(seed, "tiltseries")
    defocus = float(r.uniform(*config.defocus_range))
    total = float(r.uniform(*config.dose_range))
    angles = config.angles()
    h = config.shift_half_range
    shifts = [(float(a), float(b)) for a, b in r.uniform(-h, h, size=(len(angles), 2))]
    return Acquisition(defocus, total, angles, shifts, [total / len(angles)] * len(angles))


def simulate_tiltseries(
    model,
    seed: int,
    optics: OpticsConfig | None = None,
    config: TiltConfig | None = None,
    threads: int = 1,
    dqe_curve: DqeCurve | None = None,
) -> TiltSeries:
    """Simulate a full tilt series of a grandmodel.

    Per model: defocus and total dose are drawn uniformly from the configured
    ranges; the dose is split equally over all tilts. Per tilt: an image
    shift uniform in ``[-h, h]`` nm on each axis is applied. Every random
    draw comes from substreams of ``seed``, so the result does not depend on
    ``threads``.
    """
    optics = OpticsConfig() if optics is None else optics
    config = TiltConfig() if config is None else config
    pm = _as_potential(model)
    acq = draw_acquisition(seed, config)
    defocus, angles, shifts, per_tilt = acq.defocus, acq.angles, acq.shifts, acq.per_tilt_dose
    optics = replace(optics, defocus=defocus, pixel_size=pm.voxel_size)
    dqe = (dqe_curve or load_dqe()) if config.use_dqe else None
    pixel_area = (optics.pixel_size * 10.0) ** 2  # A^2
    stats = {}

    ice = (ICE_POTENTIAL, ICE_ABSORPTION) if pm.kind == "grandmodel" else (0.0, 0.0)
    rotators = (TiltRotator(pm.v_el, ice[0]), TiltRotator(pm.v_ab, ice[1]))

    def one(i):
        wave = multislice_project(pm, angles[i], optics, rotators=rotators)
        shift_px = (shifts[i][0] / optics.pixel_size, shifts[i][1] / optics.pixel_size)
        local = {}
        img = detect(wave, per_tilt[i] * pixel_area, dqe, rngs.generator(seed, "detector", i), shift_px, local)
        return img, local.get("clamped", 0)

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(one, range(len(angles))))
    else:
        results = [one(i) for i in range(len(angles))]
    stats["clamped"] = sum(c for _, c in results)
    meta = {"defocus": defocus, "n_tilts": len(angles), "clamped_pixels": stats["clamped"]}
    return TiltSeries([img for img, _ in results], angles, shifts, per_tilt, optics, seed, meta)


def save_tiltseries(ts: TiltSeries, stem) -> None:
    from pathlib import Path

    from .mrc import write_mrc

    stem = Path(stem)
    stack = np.stack([np.asarray(p.data) for p in ts.projections], axis=2)
    write_mrc(stem.with_suffix(".mrc"), stack, voxel_size=ts.pixel_size, is_stack=True)
    stem.with_suffix(".json").write_text(json.dumps(ts.sidecar(), indent=2, sort_keys=True) + "\n")


def load_tiltseries(mrc_path, sidecar_path=None) -> TiltSeries:
    from pathlib import Path

    from .mrc import read_stack

    mrc_path = Path(mrc_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else mrc_path.with_suffix(".json")
    images, pixel = read_stack(mrc_path)
    meta = json.loads(sidecar_path.read_text())
    optics = OpticsConfig(**meta.get("optics", {"pixel_size": pixel}))
    n = len(images)
    angles = meta.get("angles") or TiltConfig(n_tilts=n).angles()
    shifts = [tuple(s) for s in meta.get("shifts", [(0.0, 0.0)] * n)]
    dose = meta.get("per_tilt_dose", [0.0] * n)
    extra = {k: meta[k] for k in ("defocus",) if k in meta}
    return TiltSeries([Grid3(im, pixel) for im in images], angles, shifts, dose, optics, meta.get("seed", 0), extra)
