"""Minimal MRC2014 reader/writer.

Volumes are written as mode 2 (float32), little-endian, with the standard
1024-byte header and no extended header. Nothing time-dependent goes into the
header, so identical data always produce identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .volume import Grid3

HEADER_BYTES = 1024

_MODES = {
    0: np.dtype("<i1"),
    1: np.dtype("<i2"),
    2: np.dtype("<f4"),
    6: np.dtype("<u2"),
    12: np.dtype("<f2"),
}


class MrcError(ValueError):
    pass


def _header(data: np.ndarray, voxel_size_nm: float, origin_nm, ispg: int, labels) -> bytes:
    nx, ny, nz = data.shape
    a = voxel_size_nm * 10.0  # MRC cell lengths are in Angstrom
    d64 = data.astype(np.float64)
    h = bytearray(HEADER_BYTES)
    struct.pack_into("<10i", h, 0, nx, ny, nz, 2, 0, 0, 0, nx, ny, nz)
    struct.pack_into("<6f", h, 40, nx * a, ny * a, nz * a, 90.0, 90.0, 90.0)
    struct.pack_into("<3i", h, 64, 1, 2, 3)
    struct.pack_into(
        "<3f", h, 76, float(d64.min()), float(d64.max()), float(d64.mean())
    )
    struct.pack_into("<2i", h, 88, ispg, 0)
    h[104:108] = b"MRCO"
    struct.pack_into("<i", h, 108, 20140)
    o = [float(v) * 10.0 for v in origin_nm]
    struct.pack_into("<3f", h, 196, *o)
    h[208:212] = b"MAP "
    h[212:216] = bytes([0x44, 0x44, 0x00, 0x00])
    struct.pack_into("<f", h, 216, float(d64.std()))
    labels = list(labels)[:10]
    struct.pack_into("<i", h, 220, len(labels))
    for i, lab in enumerate(labels):
        raw = lab.encode("ascii", "replace")[:80].ljust(80)
        h[224 + 80 * i : 224 + 80 * (i + 1)] = raw
    return bytes(h)


def write_mrc(path, grid: Grid3 | np.ndarray, voxel_size: float | None = None, labels=(), is_stack: bool = False) -> None:
    """Write a 2D or 3D grid as an MRC file.

    ``voxel_size`` (nm) is only needed when passing a bare array. Stacks of
    2D images (tilt series) should pass ``is_stack=True`` so the space group
    is written as 0.
    """
    if isinstance(grid, Grid3):
        data = np.asarray(grid.data)
        vs = grid.voxel_size
        origin = (tuple(grid.origin) + (0.0, 0.0, 0.0))[:3]
    else:
        data = np.asarray(grid)
        vs = 1.0 if voxel_size is None else float(voxel_size)
        origin = (0.0, 0.0, 0.0)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise MrcError("only 2D/3D data can be written")
    if not np.all(np.isfinite(data)):
        raise MrcError("refusing to write non-finite values")
    f32 = data.astype("<f4")
    header = _header(f32, vs, origin, 0 if is_stack else 1, labels)
    with open(path, "wb") as fh:
        fh.write(header)
        # file order is x fastest, then y, then z
        fh.write(np.ascontiguousarray(f32.transpose(2, 1, 0)).tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_BYTES)
    if len(raw) < HEADER_BYTES:
        raise MrcError(f"{path}: file shorter than an MRC header")
    stamp = raw[212:214]
    endian = ">" if stamp == b"\x11\x11" else "<"
    nx, ny, nz, mode = struct.unpack_from(endian + "4i", raw, 0)
    mx, my, mz = struct.unpack_from(endian + "3i", raw, 28)
    cella = struct.unpack_from(endian + "3f", raw, 40)
    dmin, dmax, dmean = struct.unpack_from(endian + "3f", raw, 76)
    ispg, nsymbt = struct.unpack_from(endian + "2i", raw, 88)
    origin = struct.unpack_from(endian + "3f", raw, 196)
    nlabl = struct.unpack_from(endian + "i", raw, 220)[0]
    labels = [
        raw[224 + 80 * i : 224 + 80 * (i + 1)].decode("ascii", "replace").rstrip()
        for i in range(max(0, min(nlabl, 10)))
    ]
    if min(nx, ny, nz) <= 0:
        raise MrcError(f"{path}: invalid dimensions {(nx, ny, nz)}")
    if mode not in _MODES:
        raise MrcError(f"{path}: unsupported MRC mode {mode}")
    return {
        "nx": nx, "ny": ny, "nz": nz, "mode": mode,
        "mx": mx, "my": my, "mz": mz, "cella": cella,
        "dmin": dmin, "dmax": dmax, "dmean": dmean,
        "ispg": ispg, "nsymbt": nsymbt, "origin": origin,
        "map": raw[208:212], "machst": raw[212:216],
        "labels": labels, "endian": endian,
    }


def read_mrc(path, squeeze: bool = True) -> Grid3:
    """Read an MRC file into a float64 :class:`Grid3` (nm units).

    Single-section files come back as 2D grids when ``squeeze`` is set.
    """
    h = read_header(path)
    dt = _MODES[h["mode"]].newbyteorder(h["endian"])
    n = h["nx"] * h["ny"] * h["nz"]
    with open(path, "rb") as fh:
        fh.seek(HEADER_BYTES + h["nsymbt"])
        buf = np.frombuffer(fh.read(n * dt.itemsize), dtype=dt)
    if buf.size != n:
        raise MrcError(f"{Path(path)}: truncated data block ({buf.size} of {n} values)")
    data = buf.reshape(h["nz"], h["ny"], h["nx"]).transpose(2, 1, 0).astype(np.float64)
    mx = h["mx"] if h["mx"] > 0 else h["nx"]
    vs = h["cella"][0] / mx / 10.0 if h["cella"][0] > 0 else 1.0
    origin = tuple(o / 10.0 for o in h["origin"])
    if squeeze and data.shape[2] == 1:
        data = data[:, :, 0]
    return Grid3(np.ascontiguousarray(data), vs, origin)


def read_stack(path) -> tuple:
    """Read an image stack; returns (list of 2D arrays, pixel size nm)."""
    g = read_mrc(path, squeeze=False)
    return [np.array(g.data[:, :, k]) for k in range(g.dims[2])], g.voxel_size
