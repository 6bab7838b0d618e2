import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cryobench.volume import (
    EulerZXZ,
    Grid3,
    bin,
    dft3,
    fourier_shift,
    idft3,
    paste,
    rotate_bspline,
)


def smooth_field(n=32, vs=1.0):
    x = (np.arange(n) + 0.5 - n / 2) / n
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    return Grid3(np.exp(-((X - 0.05) ** 2 + 2 * Y**2 + (Z + 0.03) ** 2) / 0.02), vs)


angles = st.floats(-360.0, 360.0, allow_nan=False)


class TestGrid3:
    def test_rejects_bad_geometry(self):
        with pytest.raises(ValueError):
            Grid3(np.zeros((0, 3, 3)))
        with pytest.raises(ValueError):
            Grid3(np.zeros((3, 3, 3)), voxel_size=0.0)
        with pytest.raises(ValueError):
            Grid3(np.zeros(5))

    def test_read_only(self):
        g = Grid3(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            g.data[0, 0, 0] = 1.0

    def test_voxel_centre_convention(self):
        g = Grid3(np.zeros((4, 4, 4)), 0.5, origin=(1.0, 2.0, 3.0))
        assert np.allclose(g.index_to_physical((0, 0, 0)), (1.25, 2.25, 3.25))
        assert np.allclose(g.physical_to_index(g.index_to_physical((3, 1, 2))), (3, 1, 2))
        assert np.allclose(g.center, (2.0, 3.0, 4.0))


class TestEuler:
    @settings(max_examples=50, deadline=None)
    @given(angles, st.floats(0.0, 180.0), angles)
    def test_inverse_composes_to_identity(self, phi, theta, psi):
        e = EulerZXZ(phi, theta, psi)
        assert np.allclose(e.matrix() @ e.inverse().matrix(), np.eye(3), atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(angles, st.floats(1.0, 179.0), angles)
    def test_matrix_round_trip(self, phi, theta, psi):
        m = EulerZXZ(phi, theta, psi).matrix()
        assert np.allclose(EulerZXZ.from_matrix(m).matrix(), m, atol=1e-9)

    def test_zxz_order(self):
        # Rz(90) applied last: x axis goes to y
        m = EulerZXZ(90.0, 0.0, 0.0).matrix()
        assert np.allclose(m @ [1, 0, 0], [0, 1, 0], atol=1e-12)
        # Rx(90) maps y to z
        assert np.allclose(EulerZXZ(0.0, 90.0, 0.0).matrix() @ [0, 1, 0], [0, 0, 1], atol=1e-12)


class TestRotate:
    def test_identity(self, rng):
        g = Grid3(rng.normal(size=(12, 10, 8)))
        out = rotate_bspline(g, EulerZXZ(0, 0, 0))
        span = np.ptp(g.data)
        assert np.max(np.abs(out.data - g.data)) <= 1e-6 * span

    @pytest.mark.parametrize("matrix", [False, True])
    def test_impulse_quarter_turn_about_z(self, matrix):
        n = 32
        a = np.zeros((n, n, n))
        c = n // 2
        a[c + 10, c, c] = 1.0
        g = Grid3(a)
        rot = EulerZXZ(90, 0, 0)
        # rotate about the centre of voxel (c, c, c)
        out = rotate_bspline(g, rot.matrix() if matrix else rot, center=g.index_to_physical((c, c, c)))
        peak = np.unravel_index(np.argmax(out.data), out.dims)
        expected = np.round(rot.matrix() @ [10, 0, 0]).astype(int) + c
        assert np.all(np.abs(np.subtract(peak, expected)) <= 1)
        assert tuple(expected) == (c, c + 10, c)

    def test_impulse_general_rotation(self):
        n = 40
        a = np.zeros((n, n, n))
        c = n // 2
        a[c + 8, c - 5, c + 3] = 1.0
        g = Grid3(a)
        rot = EulerZXZ(37.0, 61.0, -20.0)
        out = rotate_bspline(g, rot, center=g.index_to_physical((c, c, c)))
        peak = np.unravel_index(np.argmax(out.data), out.dims)
        expected = rot.matrix() @ [8, -5, 3] + c
        assert np.linalg.norm(np.subtract(peak, expected)) <= np.sqrt(3)

    @settings(max_examples=10, deadline=None)
    @given(angles, st.floats(0.0, 180.0), angles)
    def test_constant_interior(self, phi, theta, psi):
        g = Grid3(np.full((20, 20, 20), 3.5))
        out = rotate_bspline(g, EulerZXZ(phi, theta, psi), fill=3.5)
        assert np.max(np.abs(out.data - 3.5)) <= 1e-6

    def test_constant_interior_with_zero_fill(self):
        # spline prefilter ringing from the edge step decays ~0.27x per voxel
        n = 48
        g = Grid3(np.full((n, n, n), 2.0))
        out = rotate_bspline(g, EulerZXZ(30, 40, 50))
        x = np.arange(n) + 0.5 - n / 2
        r = np.sqrt(x[:, None, None] ** 2 + x[None, :, None] ** 2 + x[None, None, :] ** 2)
        interior = r < n / 2 - 12
        assert np.max(np.abs(out.data[interior] - 2.0)) <= 1e-6

    @pytest.mark.parametrize("euler", [(30, 45, 60), (90, 90, 0), (-15, 120, 200), (10, 0, 0)])
    def test_round_trip_smooth_field(self, euler):
        g = smooth_field()
        e = EulerZXZ(*euler)
        back = rotate_bspline(rotate_bspline(g, e), e.inverse())
        n = g.dims[0]
        sl = slice(n // 4, 3 * n // 4)
        err = back.data[sl, sl, sl] - g.data[sl, sl, sl]
        assert np.sqrt(np.mean(err**2)) <= 0.01 * np.ptp(g.data)

    def test_fill_outside_support(self):
        g = Grid3(np.ones((16, 16, 16)))
        out = rotate_bspline(g, EulerZXZ(45, 45, 0), fill=-7.0)
        assert abs(out.data[0, 0, 0] + 7.0) < 0.1

    def test_rejects_non_finite(self):
        a = np.zeros((8, 8, 8))
        a[1, 1, 1] = np.nan
        with pytest.raises(ValueError):
            rotate_bspline(Grid3(a), EulerZXZ(10, 0, 0))

    def test_does_not_mutate_input(self, rng):
        data = rng.normal(size=(10, 10, 10))
        g = Grid3(data.copy())
        rotate_bspline(g, EulerZXZ(10, 20, 30))
        assert np.array_equal(g.data, data)


class TestBin:
    def test_ones(self):
        out = bin(Grid3(np.ones((4, 4, 4)), 0.5), 2)
        assert out.dims == (2, 2, 2)
        assert np.all(out.data == 1.0)
        assert out.voxel_size == 1.0

    def test_arithmetic_mean_2d(self):
        out = bin(Grid3(np.array([[1.0, 3.0], [5.0, 7.0]])), 2)
        assert out.data.shape == (1, 1)
        assert out.data[0, 0] == 4.0

    def test_projection_dims(self):
        out = bin(Grid3(np.zeros((1024, 1024), dtype=np.float32), 0.5), 2)
        assert out.dims == (512, 512)
        assert out.voxel_size == 1.0

    @pytest.mark.parametrize("shape,axis", [((5, 4, 4), "x"), ((4, 6, 3), "z"), ((4, 3, 4), "y")])
    def test_indivisible_names_axis(self, shape, axis):
        with pytest.raises(ValueError, match=f"axis {axis}"):
            bin(Grid3(np.zeros(shape)), 2)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31))
    def test_mean_preserved(self, factor, m, seed):
        a = np.random.default_rng(seed).normal(size=(factor * m, factor * (m + 1), factor))
        out = bin(Grid3(a), factor)
        assert np.isclose(out.data.mean(), a.mean(), rtol=1e-12, atol=1e-12)


class TestDft:
    def test_round_trip(self, rng):
        g = Grid3(rng.normal(size=(16, 12, 10)))
        back = idft3(dft3(g))
        assert np.linalg.norm(back.data - g.data) <= 1e-10 * np.linalg.norm(g.data)

    def test_delta_gives_constant(self):
        a = np.zeros((8, 8, 8))
        a[0, 0, 0] = 1.0
        G = dft3(Grid3(a)).data
        assert np.allclose(G, G[0, 0, 0])

    def test_cosine_support(self):
        n, k = 16, 3
        x = np.arange(n)
        a = np.broadcast_to(np.cos(2 * np.pi * k * x / n)[:, None, None], (n, n, n)).copy()
        G = np.abs(dft3(Grid3(a)).data)
        support = set(zip(*np.nonzero(G > 1e-9)))
        assert support == {(k, 0, 0), (n - k, 0, 0)}

    def test_parseval(self, rng):
        a = rng.normal(size=(16, 16, 16))
        G = dft3(Grid3(a)).data
        assert np.isclose(np.sum(a**2), np.sum(np.abs(G) ** 2), rtol=1e-9)

    def test_linearity(self, rng):
        a, b = rng.normal(size=(2, 16, 16, 16))
        lhs = dft3(Grid3(2.0 * a - 3.0 * b)).data
        rhs = 2.0 * dft3(Grid3(a)).data - 3.0 * dft3(Grid3(b)).data
        assert np.max(np.abs(lhs - rhs)) <= 1e-9 * np.max(np.abs(rhs))

    def test_shift_theorem(self, rng):
        a = rng.normal(size=(16, 16, 16))
        s = (3, -2, 5)
        G = dft3(Grid3(np.roll(a, s, axis=(0, 1, 2)))).data
        q = np.meshgrid(*[np.fft.fftfreq(16)] * 3, indexing="ij")
        expected = dft3(Grid3(a)).data * np.exp(-2j * np.pi * sum(qi * si for qi, si in zip(q, s)))
        assert np.max(np.abs(G - expected)) <= 1e-9 * np.max(np.abs(expected))

    def test_fourier_shift_integer_matches_roll(self, rng):
        a = rng.normal(size=(12, 10))
        assert np.allclose(fourier_shift(a, (2, -3)), np.roll(a, (2, -3), axis=(0, 1)), atol=1e-12)


class TestPaste:
    def test_impulse(self):
        out = paste(Grid3(np.ones((1, 1, 1))), Grid3(np.zeros((8, 8, 8))), (3, 3, 3))
        assert out.data[3, 3, 3] == 1.0
        assert out.data.sum() == 1.0

    def test_add_twice(self):
        sub = Grid3(np.full((2, 2, 2), 1.5))
        out = paste(sub, paste(sub, Grid3(np.zeros((6, 6, 6))), (1, 2, 3)), (1, 2, 3))
        assert np.all(out.data[1:3, 2:4, 3:5] == 3.0)

    def test_replace(self):
        out = paste(Grid3(np.full((2, 2, 2), 4.0)), Grid3(np.ones((4, 4, 4))), (0, 0, 0), mode="replace")
        assert np.all(out.data[:2, :2, :2] == 4.0)
        assert out.data.sum() == 4.0 * 8 + 56

    def test_out_of_bounds(self):
        with pytest.raises(ValueError):
            paste(Grid3(np.ones((3, 3, 3))), Grid3(np.zeros((4, 4, 4))), (2, 0, 0))
        with pytest.raises(ValueError):
            paste(Grid3(np.ones((1, 1, 1))), Grid3(np.zeros((4, 4, 4))), (-1, 0, 0))

    def test_target_unchanged(self):
        target = Grid3(np.zeros((4, 4, 4)))
        paste(Grid3(np.ones((1, 1, 1))), target, (0, 0, 0))
        assert target.data.sum() == 0.0
