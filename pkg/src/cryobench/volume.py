"""Grid types and the basic volume operations shared by the whole pipeline.

All lengths are in nanometres. Arrays are indexed ``data[ix, iy, iz]`` (x
first). Voxel ``i`` has its centre at ``origin + (i + 0.5) * voxel_size``,
so ``origin`` is the lower corner of the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

__all__ = [
    "Grid3",
    "ComplexGrid3",
    "EulerZXZ",
    "rotate_bspline",
    "bin",
    "dft3",
    "idft3",
    "paste",
    "fourier_shift",
    "frequency_grid",
]


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Grid3:
    """Real scalar field on a regular grid (2D slabs are allowed).

    Parameters
    ----------
    data : np.ndarray
        2D or 3D array. It is marked read-only on construction.
    voxel_size : float
        Isotropic sampling in nm.
    origin : tuple of float
        Physical position (nm) of the lower corner of voxel ``(0, 0, 0)``.
    """

    data: np.ndarray
    voxel_size: float = 1.0
    origin: tuple = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim not in (2, 3):
            raise ValueError(f"grid must be 2D or 3D, got {data.ndim}D")
        if min(data.shape) <= 0:
            raise ValueError(f"grid dims must be positive, got {data.shape}")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be > 0, got {self.voxel_size}")
        if np.iscomplexobj(data):
            raise TypeError("Grid3 holds real data; use ComplexGrid3")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) < data.ndim:
            origin = origin + (0.0,) * (data.ndim - len(origin))
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "origin", origin[: max(3, data.ndim)])
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=float) * self.voxel_size

    @property
    def center(self) -> np.ndarray:
        """Physical centre of the grid."""
        return np.asarray(self.origin[: self.data.ndim]) + 0.5 * self.extent

    def index_to_physical(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=float)
        o = np.asarray(self.origin[: idx.shape[-1]])
        return o + (idx + 0.5) * self.voxel_size

    def physical_to_index(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        o = np.asarray(self.origin[: p.shape[-1]])
        return (p - o) / self.voxel_size - 0.5

    def replace(self, data: np.ndarray, voxel_size: float | None = None) -> "Grid3":
        return Grid3(data, self.voxel_size if voxel_size is None else voxel_size, self.origin)


@dataclass(frozen=True)
class ComplexGrid3:
    """Complex field with the same geometry rules as :class:`Grid3`."""

    data: np.ndarray
    voxel_size: float = 1.0
    origin: tuple = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim not in (2, 3):
            raise ValueError(f"grid must be 2D or 3D, got {data.ndim}D")
        if min(data.shape) <= 0:
            raise ValueError(f"grid dims must be positive, got {data.shape}")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be > 0, got {self.voxel_size}")
        object.__setattr__(self, "data", _freeze(data.astype(np.complex128, copy=False)))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True)
class EulerZXZ:
    """Intrinsic Z-X-Z Euler angles in degrees."""

    phi: float
    theta: float
    psi: float

    def matrix(self) -> np.ndarray:
        """Active rotation matrix ``Rz(phi) @ Rx(theta) @ Rz(psi)``."""
        return Rotation.from_euler("ZXZ", [self.phi, self.theta, self.psi], degrees=True).as_matrix()

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "EulerZXZ":
        import warnings

        with warnings.catch_warnings():
            # gimbal lock (theta = 0 or 180) still yields a valid angle triple
            warnings.simplefilter("ignore", UserWarning)
            phi, theta, psi = Rotation.from_matrix(np.asarray(m, dtype=float)).as_euler("ZXZ", degrees=True)
        return cls(float(phi), float(theta), float(psi))

    def inverse(self) -> "EulerZXZ":
        return EulerZXZ(-self.psi, -self.theta, -self.phi)

    def as_tuple(self) -> tuple:
        return (self.phi, self.theta, self.psi)


def _as_matrix(rotation) -> np.ndarray:
    if isinstance(rotation, EulerZXZ):
        return rotation.matrix()
    m = np.asarray(rotation, dtype=float)
    if m.shape != (3, 3):
        raise ValueError("rotation must be EulerZXZ or a 3x3 matrix")
    return m


def rotate_bspline(
    g: Grid3,
    rotation,
    center=None,
    fill: float = 0.0,
) -> Grid3:
    """Rotate the content of ``g`` about a physical point.

    The output lives on the same grid; output voxel ``x`` takes the cubic
    B-spline interpolated value of ``g`` at ``center + R.T @ (x - center)``,
    i.e. the field is rotated actively by ``R``. Samples falling outside the
    input are filled with ``fill``.

    Parameters
    ----------
    g : Grid3
        3D input grid.
    rotation : EulerZXZ or (3, 3) array
        Rotation to apply.
    center : array_like, optional
        Physical rotation centre; defaults to the grid centre.
    fill : float
        Constant used outside the input support.
    """
    if g.data.ndim != 3:
        raise ValueError("rotate_bspline expects a 3D grid")
    if not np.all(np.isfinite(g.data)):
        raise ValueError("input grid contains non-finite values")
    R = _as_matrix(rotation)
    c_phys = g.center if center is None else np.asarray(center, dtype=float)
    lo = np.asarray(g.origin[:3])
    if np.any(c_phys < lo) or np.any(c_phys > lo + g.extent):
        raise ValueError(f"rotation centre {c_phys} outside grid extent")
    c = g.physical_to_index(c_phys)
    Rt = R.T
    data = np.asarray(g.data)
    dtype = np.float32 if data.dtype == np.float32 else np.float64

    if np.allclose(R, np.eye(3), atol=1e-14):
        return g.replace(np.array(data, dtype=dtype))

    # A rotation that fixes a coordinate axis only needs 2D interpolation per slab.
    fixed = [k for k in range(3) if abs(R[k, k] - 1.0) < 1e-12]
    if fixed:
        k = fixed[0]
        other = [a for a in range(3) if a != k]
        M = Rt[np.ix_(other, other)]
        off = c[other] - M @ c[other]
        src = np.moveaxis(data, k, 0)
        out = np.empty(src.shape, dtype=dtype)
        for s in range(src.shape[0]):
            ndimage.affine_transform(
                np.asarray(src[s], dtype=dtype),
                M,
                offset=off,
                order=3,
                mode="grid-constant",
                cval=fill,
                output=out[s],
            )
        return g.replace(np.moveaxis(out, 0, k).copy())

    out = ndimage.affine_transform(
        np.asarray(data, dtype=dtype),
        Rt,
        offset=c - Rt @ c,
        order=3,
        mode="grid-constant",
        cval=fill,
        output=dtype,
    )
    return g.replace(out)


def bin(g: Grid3, factor: int) -> Grid3:  # noqa: A001 - public name
    """Mean-pool ``g`` by an integer factor along every axis."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("bin factor must be a positive integer")
    if factor == 1:
        return g
    shape = g.dims
    for axis, n in zip("xyz", shape):
        if n % factor:
            raise ValueError(f"axis {axis} of size {n} is not divisible by bin factor {factor}")
    new = []
    for n in shape:
        new += [n // factor, factor]
    data = np.asarray(g.data).reshape(new).mean(axis=tuple(range(1, 2 * len(shape), 2)))
    return Grid3(data, g.voxel_size * factor, g.origin)


def dft3(g: Grid3) -> ComplexGrid3:
    """Unitary forward DFT (zero frequency at index 0)."""
    return ComplexGrid3(np.fft.fftn(np.asarray(g.data, dtype=float), norm="ortho"), g.voxel_size, g.origin)


def idft3(G: ComplexGrid3, real: bool = True):
    """Unitary inverse DFT. Returns a :class:`Grid3` of the real part unless
    ``real`` is False."""
    out = np.fft.ifftn(G.data, norm="ortho")
    if real:
        return Grid3(out.real.copy(), G.voxel_size, G.origin)
    return ComplexGrid3(out, G.voxel_size, G.origin)


def _paste_into(target: np.ndarray, sub: np.ndarray, offset, mode: str = "add", where=None) -> None:
    offset = tuple(int(o) for o in offset)
    if len(offset) != target.ndim:
        raise ValueError("offset rank does not match target")
    for o, n, m in zip(offset, sub.shape, target.shape):
        if o < 0 or o + n > m:
            raise ValueError(f"paste of shape {sub.shape} at {offset} exceeds target {target.shape}")
    sl = tuple(slice(o, o + n) for o, n in zip(offset, sub.shape))
    if mode == "add":
        if where is None:
            target[sl] += sub
        else:
            target[sl][where] += sub[where]
    elif mode == "replace":
        if where is None:
            target[sl] = sub
        else:
            target[sl][where] = sub[where]
    else:
        raise ValueError(f"unknown paste mode {mode!r}")


def paste(sub: Grid3, into: Grid3, offset, mode: str = "add") -> Grid3:
    """Return a copy of ``into`` with ``sub`` added or written at ``offset``."""
    out = np.array(into.data, copy=True)
    _paste_into(out, np.asarray(sub.data), offset, mode)
    return into.replace(out)


def frequency_grid(shape, voxel_size: float) -> list:
    """Per-axis frequency coordinates (cycles / nm) broadcastable to ``shape``."""
    axes = []
    for i, n in enumerate(shape):
        f = np.fft.fftfreq(n, d=voxel_size)
        s = [1] * len(shape)
        s[i] = n
        axes.append(f.reshape(s))
    return axes


def fourier_shift(a: np.ndarray, shift) -> np.ndarray:
    """Translate a real array by a (sub-)pixel shift using the shift theorem."""
    f = np.fft.fftn(a)
    phase = 0.0
    for q, s in zip(frequency_grid(a.shape, 1.0), shift):
        phase = phase + q * s
    return np.fft.ifftn(f * np.exp(-2j * np.pi * phase)).real
