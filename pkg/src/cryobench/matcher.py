"""Template-matching baseline (TM / TM-F) and LoG fiducial picking.

Scores are masked, locally normalised cross-correlations (weighted Pearson
correlation under a soft spherical mask) computed for every voxel with FFTs,
so the volume is treated as periodic.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage
from scipy.optimize import curve_fit

from .imaging import OpticsConfig, phase_ctf
from .structchem import PotentialMap
from .volume import EulerZXZ, Grid3, frequency_grid, rotate_bspline

log = logging.getLogger(__name__)

TEMPLATE_DEFOCUS = 3650.0  # nm
TEMPLATE_LOWPASS = 4.0  # nm
TEMPLATE_VOXEL = 1.0  # nm


@dataclass(frozen=True)
class TemplateSpec:
    class_id: str
    template: Grid3
    mask: Grid3
    mask_radius: float  # nm
    handedness: str = "normal"
    support_radius: float = 0.0  # nm, radius of the particle footprint


@dataclass(frozen=True)
class Candidate:
    class_id: str
    position: tuple  # voxel indices
    orientation: int
    score: float
    handedness: str = "normal"

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("candidate score must be finite")


@dataclass(frozen=True)
class ScoreThreshold:
    mu: float
    sigma: float
    method: str = "fit"  # "fit" or "fallback"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("threshold sigma must be positive")

    @property
    def cutoff(self) -> float:
        return self.mu - 2.0 * self.sigma

    def apply(self, candidates) -> list:
        return [c for c in candidates if c.score >= self.cutoff]


# ---------------------------------------------------------------------------
# templates


def resample(g: Grid3, voxel_size: float) -> Grid3:
    """Cubic-spline resampling onto a centred grid of another voxel size."""
    if abs(g.voxel_size - voxel_size) < 1e-12:
        return g
    ratio = voxel_size / g.voxel_size
    n_in = np.array(g.dims)
    m = np.maximum(np.ceil(n_in / ratio).astype(int), 1)
    m += 1 - m % 2
    c_in = (n_in - 1) / 2.0
    c_out = (m - 1) / 2.0
    out = ndimage.affine_transform(
        np.asarray(g.data, dtype=float),
        np.diag([ratio] * 3),
        offset=c_in - ratio * c_out,
        output_shape=tuple(m),
        order=3,
        mode="grid-constant",
        cval=0.0,
    )
    origin = tuple(np.asarray(g.center) - 0.5 * m * voxel_size)
    return Grid3(out, voxel_size, origin)


def gaussian_lowpass(data: np.ndarray, voxel_size: float, cutoff: float) -> np.ndarray:
    """Gaussian low-pass with frequency width ``(1 / cutoff) / 3``.

    The transfer at the cutoff frequency is ``exp(-4.5)``, so less than
    1.3e-4 of the power above the cutoff survives.
    """
    sigma_q = 1.0 / cutoff / 3.0
    q2 = sum(f**2 for f in frequency_grid(data.shape, voxel_size))
    F = np.fft.fftn(data) * np.exp(-0.5 * q2 / sigma_q**2)
    return np.fft.ifftn(F).real


def spherical_mask(n: int, radius: float, edge: float = 1.0) -> np.ndarray:
    """Soft ball of ``radius`` voxels with a Gaussian fall-off of width
    ``edge`` voxels, centred on voxel ``n // 2`` of an ``n^3`` box."""
    c = np.arange(n) - n // 2
    r = np.sqrt(c[:, None, None] ** 2 + c[None, :, None] ** 2 + c[None, None, :] ** 2)
    m = np.where(r <= radius, 1.0, np.exp(-0.5 * ((r - radius) / edge) ** 2))
    m[r > radius + 3.0 * edge] = 0.0
    return m


def _support(pm) -> np.ndarray:
    if isinstance(pm, PotentialMap) and pm.shape is not None:
        return np.asarray(pm.shape.data) > 0.5
    v = np.abs(np.asarray(getattr(pm, "v_el", pm).data))
    return v > 0.1 * v.max() if v.max() > 0 else np.zeros(v.shape, bool)


def build_template(
    potential,
    class_id: str = "",
    defocus: float = TEMPLATE_DEFOCUS,
    lowpass: float = TEMPLATE_LOWPASS,
    voxel_size: float = TEMPLATE_VOXEL,
    optics: OpticsConfig | None = None,
    mask_edge: float = 1.0,
    pad: int = 2,
) -> tuple:
    """Normal and mirrored templates of a particle.

    The elastic potential is resampled to ``voxel_size``, placed in an odd
    box large enough for the soft mask, multiplied in Fourier space by the
    phase CTF ``-sin(chi)`` with envelopes at ``defocus`` (nm) and
    Gaussian low-passed at ``lowpass`` (nm). The mirrored copy reverses the
    x axis.
    """
    if isinstance(potential, PotentialMap):
        src = potential.v_el
        support_src = Grid3(_support(potential).astype(float), src.voxel_size, src.origin)
    else:
        src = potential
        support_src = Grid3(_support(potential).astype(float), src.voxel_size, src.origin)
    v = resample(src, voxel_size)
    sup = resample(support_src, voxel_size).data > 0.5
    n0 = v.dims[0]
    c = np.arange(n0) - n0 // 2
    r = np.sqrt(c[:, None, None] ** 2 + c[None, :, None] ** 2 + c[None, None, :] ** 2)
    support_r = float(r[sup].max()) if sup.any() else 1.0
    mask_r = support_r + 1.0
    n = 2 * int(math.ceil(mask_r + 3.0 * mask_edge)) + 1 + 2 * pad
    n = max(n, n0)
    n += 1 - n % 2
    box = np.zeros((n, n, n))
    o = n // 2 - n0 // 2
    box[o : o + n0, o : o + n0, o : o + n0] = np.asarray(v.data)

    optics = replace(optics or OpticsConfig(), defocus=defocus, pixel_size=voxel_size)
    q = np.sqrt(sum(f**2 for f in frequency_grid(box.shape, voxel_size)))
    t = np.fft.ifftn(np.fft.fftn(box) * phase_ctf(q, optics)).real
    t = gaussian_lowpass(t, voxel_size, lowpass)
    mask = spherical_mask(n, mask_r, mask_edge)
    t_grid = Grid3(t, voxel_size)
    m_grid = Grid3(mask, voxel_size)
    normal = TemplateSpec(class_id, t_grid, m_grid, mask_r * voxel_size, "normal", support_r * voxel_size)
    flipped = TemplateSpec(class_id, t_grid.replace(t[::-1].copy()), m_grid, mask_r * voxel_size, "flipped", support_r * voxel_size)
    return normal, flipped


# ---------------------------------------------------------------------------
# orientations


def orientation_grid(spacing: float = 30.0) -> list:
    """Quasi-uniform SO(3) sampling: Fibonacci-sphere directions for the
    rotated z axis (about ``4 pi / spacing^2`` of them) times in-plane
    rotations every ``spacing`` degrees. The identity is always included."""
    step = np.deg2rad(spacing)
    n_dir = max(1, int(math.ceil(4.0 * np.pi / step**2)))
    n_psi = max(1, int(round(360.0 / spacing)))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    out = []
    for i in range(n_dir):
        z = 1.0 - 2.0 * (i + 0.5) / n_dir if n_dir > 1 else 1.0
        theta = np.rad2deg(np.arccos(np.clip(z, -1.0, 1.0)))
        phi = np.rad2deg((i * golden) % (2.0 * np.pi))
        for k in range(n_psi):
            out.append(EulerZXZ(phi, theta, k * 360.0 / n_psi))
    out.insert(0, EulerZXZ(0.0, 0.0, 0.0))
    return out


# ---------------------------------------------------------------------------
# NCC


def _kernel(small: np.ndarray, shape) -> np.ndarray:
    """Zero-padded copy of ``small`` with its centre voxel moved to index 0."""
    big = np.zeros(shape)
    big[tuple(slice(0, s) for s in small.shape)] = small
    return np.roll(big, tuple(-(s // 2) for s in small.shape), axis=tuple(range(small.ndim)))


class _LocalStats:
    """FFTs of the volume and the per-voxel masked standard deviation."""

    def __init__(self, volume: np.ndarray, mask: np.ndarray):
        self.shape = volume.shape
        self.axes = tuple(range(volume.ndim))
        self.F = np.fft.rfftn(volume)
        self.P = float(mask.sum())
        Fm = np.conj(np.fft.rfftn(_kernel(mask, self.shape)))
        mean = np.fft.irfftn(Fm * self.F, self.shape, self.axes) / self.P
        mean2 = np.fft.irfftn(Fm * np.fft.rfftn(volume**2), self.shape, self.axes) / self.P
        var = mean2 - mean**2
        # relative to the signal power so a constant volume reads as flat
        eps = 1e-10 * max(float(mean2.max()), 1e-300)
        self.valid = var > eps
        self.std = np.sqrt(np.where(self.valid, var, 1.0))

    def score(self, template: np.ndarray, mask: np.ndarray) -> np.ndarray:
        mu = (mask * template).sum() / self.P
        tn = mask * (template - mu)
        sig = math.sqrt((mask * (template - mu) ** 2).sum() / self.P)
        if sig <= 1e-12 * max(float(np.abs(template).max()), 1e-300):
            return np.zeros(self.shape)
        tn = tn / sig
        c = np.fft.irfftn(np.conj(np.fft.rfftn(_kernel(tn, self.shape))) * self.F, self.shape, self.axes)
        s = np.where(self.valid, c / (self.P * self.std), 0.0)
        return np.clip(s, -1.0, 1.0)


def ncc_search(tomogram: Grid3, template: Grid3, mask: Grid3, orientations, threads: int = 1) -> tuple:
    """Best masked NCC score and its orientation index at every voxel.

    The template is rotated about its centre voxel for each orientation; the
    spherical mask is used unrotated. Ties keep the lower orientation index.
    """
    vol = np.asarray(tomogram.data, dtype=float)
    t = np.asarray(template.data, dtype=float)
    m = np.asarray(mask.data, dtype=float)
    if t.shape != m.shape:
        raise ValueError("template and mask shapes differ")
    if any(a > b for a, b in zip(t.shape, vol.shape)):
        raise ValueError(f"template {t.shape} larger than tomogram {vol.shape}")
    stats = _LocalStats(vol, m)
    tg = Grid3(t, 1.0)
    centre = (np.array(t.shape) // 2 + 0.5)

    def one(rot):
        tr = rotate_bspline(tg, rot, center=centre).data
        return stats.score(np.asarray(tr), m)

    best = np.full(vol.shape, -np.inf)
    arg = np.zeros(vol.shape, dtype=np.int32)
    orientations = list(orientations)
    batch = max(1, int(threads))
    with ThreadPoolExecutor(batch) as ex:
        for start in range(0, len(orientations), batch):
            chunk = orientations[start : start + batch]
            results = list(ex.map(one, chunk)) if batch > 1 else [one(chunk[0])]
            for k, s in enumerate(results):
                better = s > best
                best[better] = s[better]
                arg[better] = start + k
    return tomogram.replace(best), Grid3(arg, tomogram.voxel_size, tomogram.origin)


# ---------------------------------------------------------------------------
# candidates


def extract_candidates(
    scores: Grid3,
    n: int = 1000,
    exclusion_radius: float = 5.0,
    orientations: Grid3 | None = None,
    class_id: str = "",
    handedness: str = "normal",
    min_score: float = 0.0,
) -> list:
    """Greedy peak picking: repeatedly take the highest remaining score and
    suppress a ball of ``exclusion_radius`` voxels around it. Stops after
    ``n`` peaks, when every voxel is suppressed, or when the best remaining
    score is not above ``min_score``."""
    s = np.asarray(scores.data, dtype=float)
    shape = s.shape
    flat = s.ravel()
    order = np.argsort(-flat, kind="stable")
    suppressed = np.zeros(flat.size, dtype=bool)
    rad = int(math.floor(exclusion_radius))
    off = np.arange(-rad, rad + 1)
    dx, dy, dz = np.meshgrid(off, off, off, indexing="ij")
    ball = dx**2 + dy**2 + dz**2 <= exclusion_radius**2
    dx, dy, dz = dx[ball], dy[ball], dz[ball]
    orient = None if orientations is None else np.asarray(orientations.data).ravel()
    out = []
    for fi in order:
        if len(out) >= n:
            break
        if suppressed[fi]:
            continue
        if flat[fi] <= min_score:
            break
        p = np.unravel_index(fi, shape)
        out.append(Candidate(class_id, tuple(int(v) for v in p), int(orient[fi]) if orient is not None else -1, float(flat[fi]), handedness))
        x, y, z = p[0] + dx, p[1] + dy, p[2] + dz
        ok = (x >= 0) & (x < shape[0]) & (y >= 0) & (y < shape[1]) & (z >= 0) & (z < shape[2])
        suppressed[np.ravel_multi_index((x[ok], y[ok], z[ok]), shape)] = True
    return out


def merge_candidates(lists, radius: float) -> list:
    """Merge candidate lists, keeping the higher score among candidates
    closer than or equal to ``radius`` voxels."""
    allc = sorted((c for lst in lists for c in lst), key=lambda c: -c.score)
    kept, pos = [], []
    for c in allc:
        p = np.asarray(c.position, dtype=float)
        if pos and np.min(np.sum((np.asarray(pos) - p) ** 2, axis=1)) <= radius**2:
            continue
        kept.append(c)
        pos.append(p)
    return kept


# ---------------------------------------------------------------------------
# score threshold


def _gmm_1d(x: np.ndarray, k: int, iters: int = 300) -> tuple:
    """EM for a 1D Gaussian mixture; returns (weights, means, vars, loglik).

    Two deterministic starts (quantile means, and quantile means with the
    top component at the maximum score) are run; the better one is kept.
    """
    starts = [np.quantile(x, (np.arange(k) + 0.5) / k)]
    if k > 1:
        starts.append(np.append(np.quantile(x, (np.arange(k - 1) + 0.5) / (k - 1)), x.max()))
    fits = [_em(x, mu0, iters) for mu0 in starts]
    return max(fits, key=lambda f: f[3])


def _em(x: np.ndarray, mu: np.ndarray, iters: int) -> tuple:
    n = len(x)
    k = len(mu)
    w = np.full(k, 1.0 / k)
    mu = np.array(mu, dtype=float)
    floor = 1e-6 * max(float(x.var()), 1e-12)
    var = np.full(k, max(float(x.var()) / k**2, floor))
    ll_old = -np.inf
    for _ in range(iters):
        logp = np.log(w) - 0.5 * np.log(2 * np.pi * var) - 0.5 * (x[:, None] - mu) ** 2 / var
        top = logp.max(axis=1, keepdims=True)
        lse = top[:, 0] + np.log(np.exp(logp - top).sum(axis=1))
        r = np.exp(logp - lse[:, None])
        ll = float(lse.sum())
        nk = r.sum(axis=0) + 1e-300
        w = nk / n
        mu = (r * x[:, None]).sum(axis=0) / nk
        var = np.maximum((r * (x[:, None] - mu) ** 2).sum(axis=0) / nk, floor)
        if ll - ll_old < 1e-10 * abs(ll):
            break
        ll_old = ll
    return w, mu, var, ll


def _gauss(x, a, mu, sigma):
    return a * np.exp(-0.5 * ((x - mu) / sigma) ** 2)


def fit_threshold(scores, bins: int = 50, max_modes: int = 3) -> ScoreThreshold:
    """Fit a Gaussian to the upper mode of a score histogram.

    The modes are found with a 1D Gaussian mixture (component count chosen
    by BIC); the histogram bins dominated by the highest-mean component are
    then fitted by least squares. Degenerate fits fall back to the sample
    mean and standard deviation of that component's members.
    """
    x = np.asarray(scores, dtype=float)
    if len(x) < 20:
        raise ValueError(f"need at least 20 scores to fit a threshold, got {len(x)}")
    span = float(x.max() - x.min())
    if span <= 1e-12 * max(1.0, abs(float(x.mean()))):
        return _fallback(x, "all scores identical")

    best = None
    for k in range(1, max_modes + 1):
        if len(x) < 10 * k:
            break
        w, mu, var, ll = _gmm_1d(x, k)
        bic = -2.0 * ll + (3 * k - 1) * math.log(len(x))
        if best is None or bic < best[0] - 1e-9:
            best = (bic, w, mu, var)
    _, w, mu, var = best
    up = int(np.argmax(mu))
    sd = np.sqrt(var)

    def owner(v):
        dens = w * np.exp(-0.5 * ((np.asarray(v)[:, None] - mu) / sd) ** 2) / sd
        return np.argmax(dens, axis=1)

    members = x[owner(x) == up]
    counts, edges = np.histogram(x, bins=bins)
    centres = 0.5 * (edges[1:] + edges[:-1])
    sel = (owner(centres) == up) & (centres >= members.min() - (edges[1] - edges[0]))
    if sel.sum() >= 3:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                p, _ = curve_fit(_gauss, centres[sel], counts[sel], p0=(counts[sel].max(), mu[up], sd[up]), maxfev=5000)
            a, m, s = p
            s = abs(s)
            if np.isfinite([a, m, s]).all() and a > 0 and s > 1e-9 * max(1.0, span) and x.min() - span <= m <= x.max() + span:
                return ScoreThreshold(float(m), float(s), "fit")
        except RuntimeError:
            pass
    return _fallback(members, "degenerate histogram fit")


def _fallback(x: np.ndarray, why: str) -> ScoreThreshold:
    log.warning("%s; using sample mean/std of %d scores", why, len(x))
    warnings.warn(f"{why}; threshold from sample statistics", RuntimeWarning, stacklevel=3)
    mu = float(x.mean())
    sigma = float(x.std())
    if sigma <= 0:
        sigma = np.finfo(float).eps * max(1.0, abs(mu))
    return ScoreThreshold(mu, sigma, "fallback")


# ---------------------------------------------------------------------------
# TM-F overlap filter


def overlap_filter(candidates, radii: dict, class_order) -> list:
    """Drop candidates overlapping an already accepted particle.

    Classes are processed in ``class_order`` (round, symmetric particles
    first); within a class, by descending score. A candidate survives when
    its distance to every accepted centre is at least the sum of the two
    radii (voxels).
    """
    by_class = {}
    for c in candidates:
        by_class.setdefault(c.class_id, []).append(c)
    order = list(class_order) + sorted(k for k in by_class if k not in class_order)
    acc, acc_pos, acc_r = [], [], []
    for cid in order:
        r_self = float(radii[cid])
        for c in sorted(by_class.get(cid, []), key=lambda c: -c.score):
            p = np.asarray(c.position, dtype=float)
            if acc_pos:
                d = np.sqrt(np.sum((np.asarray(acc_pos) - p) ** 2, axis=1))
                if np.any(d < r_self + np.asarray(acc_r)):
                    continue
            acc.append(c)
            acc_pos.append(p)
            acc_r.append(r_self)
    return acc


# ---------------------------------------------------------------------------
# template-matching driver


@dataclass
class ClassMatch:
    class_id: str
    raw: list  # merged candidates before thresholding
    threshold: ScoreThreshold | None
    kept: list
    seconds: float = 0.0


def match_class(
    tomogram: Grid3,
    templates,
    orientations,
    n: int = 1000,
    exclusion_radius: float | None = None,
    threads: int = 1,
) -> ClassMatch:
    """Search both handednesses of one class, merge and threshold."""
    import time

    t0 = time.perf_counter()
    lists = []
    rad = exclusion_radius
    for spec in templates:
        # default: one particle diameter, so side lobes of a hit are suppressed
        rad = rad if rad is not None else max(1.0, 2.0 * spec.support_radius / tomogram.voxel_size)
        s, o = ncc_search(tomogram, spec.template, spec.mask, orientations, threads)
        lists.append(extract_candidates(s, n, rad, o, spec.class_id, spec.handedness))
    merged = merge_candidates(lists, rad)[:n]
    thr = None
    kept = merged
    if len(merged) >= 20:
        thr = fit_threshold([c.score for c in merged])
        kept = thr.apply(merged)
    else:
        log.warning("class %s: only %d candidates, no threshold fitted", templates[0].class_id, len(merged))
    return ClassMatch(templates[0].class_id, merged, thr, kept, time.perf_counter() - t0)


def prepare_tomogram(tomogram: Grid3, lowpass: float = TEMPLATE_LOWPASS) -> Grid3:
    return tomogram.replace(gaussian_lowpass(np.asarray(tomogram.data, dtype=float), tomogram.voxel_size, lowpass))


# ---------------------------------------------------------------------------
# fiducials


def log_fiducial_detect(
    tomogram: Grid3,
    sigma: float = 5.0,
    polarity: str = "bright",
    threshold_rel: float = 0.3,
    threshold_abs: float = 0.0,
) -> list:
    """Blob centres from a scale-normalised Laplacian of Gaussian.

    ``polarity`` says how dense gold appears in the volume: "bright" for
    density maps, "dark" for raw transmission tomograms. The response is
    oriented so beads are positive maxima; local maxima within a
    ``2 sigma + 1`` box above ``max(threshold_abs, threshold_rel * peak)``
    are returned, strongest first.
    """
    if polarity not in ("bright", "dark"):
        raise ValueError("polarity must be 'bright' or 'dark'")
    v = np.asarray(tomogram.data, dtype=float)
    resp = ndimage.gaussian_laplace(v, sigma) * sigma**2
    if polarity == "bright":
        resp = -resp
    peak = float(resp.max())
    if peak <= 0:
        return []
    size = int(2 * sigma + 1)
    local = ndimage.maximum_filter(resp, size=size, mode="nearest")
    hits = np.argwhere((resp == local) & (resp > max(threshold_abs, threshold_rel * peak)))
    hits = sorted(hits, key=lambda p: -resp[tuple(p)])
    return [tuple(int(c) for c in p) for p in hits]


# ---------------------------------------------------------------------------
# text IO


def format_candidates(candidates) -> str:
    return "".join(f"{c.class_id} {c.position[0]} {c.position[1]} {c.position[2]} {c.score!r}\n" for c in candidates)


def write_candidates(path, candidates) -> None:
    from pathlib import Path

    Path(path).write_text(format_candidates(candidates))
