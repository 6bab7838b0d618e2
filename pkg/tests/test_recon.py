import numpy as np
import pytest

from cryobench.imaging import OpticsConfig, TiltConfig, TiltSeries, geometric_tiltseries
from cryobench.recon import (
    ReconConfig,
    backproject,
    padded_size,
    recon_geometry,
    weighted_backprojection,
    weighting_filter,
)
from cryobench.volume import Grid3
from helpers import fwhm, point_projections

ANGLES = TiltConfig().angles()


def series(images, angles, pixel=1.0):
    n = len(images)
    return TiltSeries([Grid3(im, pixel) for im in images], list(angles), [(0.0, 0.0)] * n, [1.0] * n, OpticsConfig(pixel_size=pixel))


@pytest.fixture(scope="module")
def point_recon():
    n, p = 32, (20, 14, 11)
    ts = series(point_projections(n, p, ANGLES), ANGLES)
    return weighted_backprojection(ts, ReconConfig(bin_factor=1)), p


def test_point_maximum(point_recon):
    vol, p = point_recon
    peak = np.unravel_index(np.argmax(vol.data), vol.dims)
    assert np.linalg.norm(np.subtract(peak, p)) <= 1.0


def test_point_missing_wedge_elongation(point_recon):
    vol, p = point_recon
    d = np.asarray(vol.data)
    fx = fwhm(d[:, p[1], p[2]])
    fz = fwhm(d[p[0], p[1], :])
    assert fz >= fx


def test_point_through_simulated_projections():
    n = 32
    a = np.zeros((n, n, n))
    a[18, 12, 13] = 1.0
    ts = geometric_tiltseries(Grid3(a), ANGLES[::3])
    vol = weighted_backprojection(ts, ReconConfig(bin_factor=1)).data
    assert np.unravel_index(np.argmax(vol), vol.shape) == (18, 12, 13)


def test_single_projection_constant_along_ray():
    img = np.zeros((16, 8))
    img[5, 3] = 2.0
    vol = weighted_backprojection(series([img], [0.0]), ReconConfig(weighting="none", bin_factor=1)).data
    assert np.allclose(vol[5, 3, :], 2.0)
    assert np.count_nonzero(vol) == 16


@pytest.mark.parametrize("angle", [30.0, -45.0])
def test_single_tilted_projection_constant_along_ray(angle):
    # an image linear in x' back-projects exactly to a + b x', so every ray
    # (constant x') carries a constant value
    n = 24
    xp = np.arange(n, dtype=float)
    img = np.repeat((1.0 + 0.25 * xp)[:, None], 4, axis=1)
    vol = backproject([img], [angle], (n, 4, n))
    t = np.deg2rad(angle)
    c = np.arange(n) + 0.5 - n / 2
    ray = c[:, None] * np.cos(t) + c[None, :] * np.sin(t) + n / 2 - 0.5
    inside = (ray >= 0) & (ray <= n - 1)
    assert np.allclose(vol[:, 2, :][inside], (1.0 + 0.25 * ray)[inside], atol=1e-12)


def test_linearity(rng):
    p1 = [rng.normal(size=(16, 16)) for _ in range(7)]
    p2 = [rng.normal(size=(16, 16)) for _ in range(7)]
    angles = np.linspace(-60, 60, 7)
    cfg = ReconConfig(bin_factor=2)
    lhs = weighted_backprojection(series([2 * a - 0.5 * b for a, b in zip(p1, p2)], angles), cfg).data
    rhs = 2 * weighted_backprojection(series(p1, angles), cfg).data - 0.5 * weighted_backprojection(series(p2, angles), cfg).data
    assert np.max(np.abs(lhs - rhs)) <= 1e-6 * np.max(np.abs(rhs))


def _sphere(n=40, radius=7.0):
    x = np.arange(n) + 0.5 - n / 2
    r = np.sqrt(x[:, None, None] ** 2 + x[None, :, None] ** 2 + x[None, None, :] ** 2)
    return Grid3(np.clip(radius - r + 0.5, 0, 1))


def _xy_correlation(vol):
    return np.corrcoef(vol.ravel(), np.rot90(vol, axes=(0, 1)).ravel())[0, 1]


def test_sphere_xy_isotropy_full_coverage():
    ts = geometric_tiltseries(_sphere(), np.arange(-90.0, 90.0, 2.0))
    vol = weighted_backprojection(ts, ReconConfig(bin_factor=1)).data
    assert _xy_correlation(vol) >= 0.99
    c = vol.shape[0] // 2
    assert abs(vol[c - 12, c, c]) < 0.02 * vol[c, c, c]  # no baseline offset outside the object


def test_sphere_missing_wedge_breaks_xy_symmetry():
    # with +-60 deg only, x picks up wedge side lobes while y (the tilt axis) does not
    vol = weighted_backprojection(geometric_tiltseries(_sphere(), ANGLES), ReconConfig(bin_factor=1)).data
    c = vol.shape[0] // 2
    assert vol[c - 12, c, c] < -0.1 * vol[c, c, c]
    assert abs(vol[c, c - 12, c]) < 1e-9
    assert _xy_correlation(vol) < 0.99


def test_alignment_undoes_shift():
    n = 32
    p = (16, 16, 16)
    imgs = point_projections(n, p, ANGLES[::4])
    shifted = [np.roll(im, 2, axis=0) for im in imgs]
    ts = series(shifted, ANGLES[::4])
    ts.shifts = [(2.0, 0.0)] * len(imgs)
    vol = weighted_backprojection(ts, ReconConfig(bin_factor=1)).data
    assert np.unravel_index(np.argmax(vol), vol.shape) == p
    off = weighted_backprojection(ts, ReconConfig(bin_factor=1, align=False)).data
    assert np.unravel_index(np.argmax(off), off.shape) != p


def test_geometry():
    dims, vs = recon_geometry((1024, 1024), 0.5, ReconConfig())
    assert dims == (512, 512, 512) and vs == 1.0
    dims, vs = recon_geometry((64, 48), 0.5, ReconConfig(output_dims=(32, 24, 10)))
    assert dims == (32, 24, 10)
    with pytest.raises(ValueError, match="axis y"):
        recon_geometry((64, 47), 0.5, ReconConfig())


def test_output_sampling():
    imgs = [np.ones((16, 12))] * 3
    vol = weighted_backprojection(series(imgs, [-10, 0, 10], pixel=0.5))
    assert vol.dims == (8, 6, 8) and vol.voxel_size == 1.0


def test_empty_series():
    with pytest.raises(ValueError, match="empty"):
        weighted_backprojection(series([], []))


def test_config_validation():
    with pytest.raises(ValueError):
        ReconConfig(weighting="shepp")
    with pytest.raises(ValueError):
        ReconConfig(bin_factor=0)


@pytest.mark.parametrize("n", [8, 9, 64, 256])
def test_weighting_filters(n):
    k = np.abs(np.fft.fftfreq(n))
    exact = weighting_filter(n, "exact")
    # Ram-Lak: |k| away from DC, with a small positive DC term
    assert 0 < exact[0] < 1.0 / n
    # the padded band-limited kernel sags below |k| near Nyquist, less so as n grows
    assert np.allclose(exact[1:], k[1:], rtol=0.06 if n < 64 else 0.03, atol=0)
    w = weighting_filter(n, "ramp")
    assert np.all(w[1:] <= exact[1:] + 1e-15) and np.all(w >= 0)
    if n % 2 == 0:
        assert w[n // 2] == pytest.approx(0.0, abs=1e-15)
    assert np.all(weighting_filter(n, "none") == 1)


def test_padded_size():
    assert padded_size(64) == 128
    assert padded_size(100) == 256
