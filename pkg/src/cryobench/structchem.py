"""Atomic structures, interaction potentials and shape descriptors.

The elastic potential of a molecule is the superposition of per-atom
five-Gaussian potentials, voxel-averaged analytically, minus the potential of
the amorphous ice displaced by each atom. The displaced volume of an atom is
a sphere of its Van der Waals radius with an error-function edge.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erf, erfc

from .datafiles import read_table
from .volume import Grid3

log = logging.getLogger(__name__)

# h^2 / (2 pi m0 e) in V * Angstrom^2: converts electron scattering factors
# (Angstrom) to potential (V * Angstrom^3).
POTENTIAL_CONSTANT = 47.87801

ICE_POTENTIAL = 4.530
ICE_ABSORPTION = 0.208
TRUNCATION_RADIUS = 5.0  # Angstrom, per Gaussian term
EXCLUSION_EDGE = 1.0  # Angstrom, erf edge width of the solvent-exclusion sphere
SOLVENT_RESIDUES = frozenset({"HOH", "WAT", "H2O", "DOD", "SOL", "TIP", "TIP3"})


class StructureParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class UnknownElementError(KeyError):
    pass


@dataclass(frozen=True)
class AtomRecord:
    element: str
    position: tuple  # Angstrom
    occupancy: float = 1.0


@dataclass(frozen=True)
class ElementParams:
    a: tuple
    b: tuple
    vdw_radius: float
    mass: float


class ScatteringTable(dict):
    """Mapping element symbol -> :class:`ElementParams`."""

    def require(self, elements) -> None:
        missing = sorted({e for e in elements if e not in self})
        if missing:
            raise UnknownElementError(f"elements not in scattering table: {', '.join(missing)}")


@lru_cache(maxsize=None)
def load_scattering_table() -> ScatteringTable:
    table = ScatteringTable()
    for row in read_table("scattering.txt"):
        el = row[0].capitalize()
        vals = [float(v) for v in row[1:]]
        a, b = tuple(vals[0:5]), tuple(vals[5:10])
        if min(a) <= 0 or min(b) <= 0:
            raise ValueError(f"non-positive scattering parameter for {el}")
        table[el] = ElementParams(a, b, vals[10], vals[11])
    return table


@lru_cache(maxsize=None)
def load_materials() -> dict:
    """material -> (elastic potential V, absorption constant)."""
    return {row[0]: (float(row[1]), float(row[2])) for row in read_table("materials.txt")}


# ---------------------------------------------------------------------------
# parsing


def _element_from_name(name: str, table) -> str:
    raw = name.strip()
    letters = "".join(ch for ch in raw if ch.isalpha())
    if not letters:
        return ""
    # PDB convention: element right-justified in columns 13-14
    if name[:1].isalpha() and len(letters) >= 2 and letters[:2].capitalize() in table and name[:1] not in "CHNOSP":
        return letters[:2].capitalize()
    return letters[0].upper()


def parse_structure(text: str, drop_solvent: bool = True, table: ScatteringTable | None = None) -> list:
    """Parse ATOM/HETATM records of a PDB file, or a simple XYZ listing.

    The XYZ form has one atom per line, ``element x y z [occupancy]`` with
    coordinates in Angstrom; blank lines and lines starting with ``#`` are
    skipped. Elements missing from the scattering table are kept and
    reported with a warning.
    """
    table = load_scattering_table() if table is None else table
    lines = text.splitlines()
    is_pdb = any(ln.startswith(("ATOM", "HETATM")) for ln in lines)
    atoms = []
    for lineno, line in enumerate(lines, 1):
        if is_pdb:
            if not line.startswith(("ATOM", "HETATM")):
                continue
            if drop_solvent and line[17:21].strip() in SOLVENT_RESIDUES:
                continue
            try:
                xyz = (float(line[30:38]), float(line[38:46]), float(line[46:54]))
            except ValueError:
                raise StructureParseError(lineno, f"malformed coordinates {line[30:54]!r}") from None
            occ_field = line[54:60].strip()
            try:
                occ = float(occ_field) if occ_field else 1.0
            except ValueError:
                raise StructureParseError(lineno, f"malformed occupancy {occ_field!r}") from None
            el = line[76:78].strip().capitalize() if len(line) >= 77 else ""
            if not el:
                el = _element_from_name(line[12:16], table)
        else:
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) < 4:
                raise StructureParseError(lineno, "expected 'element x y z [occupancy]'")
            try:
                xyz = tuple(float(v) for v in parts[1:4])
                occ = float(parts[4]) if len(parts) > 4 else 1.0
            except ValueError:
                raise StructureParseError(lineno, f"malformed coordinates {s!r}") from None
            el = parts[0].capitalize()
        if not all(math.isfinite(v) for v in xyz):
            raise StructureParseError(lineno, "non-finite coordinate")
        atoms.append(AtomRecord(el, xyz, min(max(occ, 0.0), 1.0)))
    if not atoms:
        warnings.warn("structure contains no atom records", stacklevel=2)
    unknown = sorted({a.element for a in atoms} - set(table))
    if unknown:
        warnings.warn(f"unknown elements in structure: {', '.join(unknown)}", stacklevel=2)
    return atoms


# ---------------------------------------------------------------------------
# potentials


def atoms_to_arrays(atoms) -> tuple:
    if len(atoms) == 0:
        return np.zeros((0, 3)), np.zeros(0), []
    pos = np.array([a.position for a in atoms], dtype=float)
    occ = np.array([a.occupancy for a in atoms], dtype=float)
    return pos, occ, [a.element for a in atoms]


def grid_for_atoms(atoms, voxel_size: float = 0.5, margin: float = 1.0) -> tuple:
    """Cubic, odd-sized grid (shape, origin in nm) centred on the atoms'
    bounding box and large enough to hold them under any rotation."""
    pos, _, _ = atoms_to_arrays(atoms)
    if len(pos) == 0:
        n = 2 * int(math.ceil(margin / voxel_size)) + 1
        return (n, n, n), tuple(-0.5 * n * voxel_size for _ in range(3))
    pos = pos / 10.0
    c = 0.5 * (pos.min(axis=0) + pos.max(axis=0))
    rmax = float(np.sqrt(((pos - c) ** 2).sum(axis=1)).max())
    n = int(math.ceil(2 * (rmax + margin) / voxel_size))
    n += 1 - n % 2
    origin = tuple(float(ci - 0.5 * n * voxel_size) for ci in c)
    return (n, n, n), origin


def _windows(pos_a: np.ndarray, origin_a: np.ndarray, v: float, shape) -> tuple:
    w = int(math.floor(2 * TRUNCATION_RADIUS / v)) + 2
    rel = pos_a - origin_a
    start = np.floor((rel - TRUNCATION_RADIUS) / v).astype(int)
    idx = start[:, :, None] + np.arange(w)[None, None, :]  # (n, 3, w)
    valid = np.ones(idx.shape, dtype=bool)
    for ax in range(3):
        valid[:, ax] &= (idx[:, ax] >= 0) & (idx[:, ax] < shape[ax])
    return w, rel, idx, valid


def _scatter(shape, idx, valid, vals) -> np.ndarray:
    nx, ny, nz = shape
    ix, iy, iz = idx[:, 0], idx[:, 1], idx[:, 2]
    flat = (ix[:, :, None, None] * ny + iy[:, None, :, None]) * nz + iz[:, None, None, :]
    ok = valid[:, 0][:, :, None, None] & valid[:, 1][:, None, :, None] & valid[:, 2][:, None, None, :]
    return np.bincount(flat[ok], weights=vals[ok], minlength=nx * ny * nz)


def _resolve_grid(atoms, voxel_size, grid):
    if grid is None:
        shape, origin = grid_for_atoms(atoms, voxel_size)
    else:
        shape, origin = grid
    return tuple(int(s) for s in shape), tuple(float(o) for o in origin)


def gaussian_potential(atoms, voxel_size: float = 0.5, grid=None, table=None, chunk: int = 1024) -> Grid3:
    """Voxel-averaged superposition of five-Gaussian atomic potentials (V)."""
    table = load_scattering_table() if table is None else table
    shape, origin = _resolve_grid(atoms, voxel_size, grid)
    pos, occ, els = atoms_to_arrays(atoms)
    table.require(els)
    v = voxel_size * 10.0
    out = np.zeros(int(np.prod(shape)))
    if len(pos):
        a = np.array([table[e].a for e in els])
        b = np.array([table[e].b for e in els])
        amp = POTENTIAL_CONSTANT * a * occ[:, None] / v**3  # (n, 5)
        sk = 2.0 * np.pi / np.sqrt(b)  # sqrt(4 pi^2 / b)
        for s in range(0, len(pos), chunk):
            sl = slice(s, s + chunk)
            w, rel, idx, valid = _windows(pos[sl], np.array(origin) * 10.0, v, shape)
            lo = idx * v - rel[:, :, None]  # (n, 3, w)
            k = sk[sl][:, :, None, None]  # (n, 5, 1, 1)
            f = 0.5 * (erf(k * (lo + v)[:, None]) - erf(k * lo[:, None]))  # (n, 5, 3, w)
            vals = np.einsum("nt,nti,ntj,ntk->nijk", amp[sl], f[:, :, 0], f[:, :, 1], f[:, :, 2])
            out += _scatter(shape, idx, valid, vals)
    return Grid3(out.reshape(shape), voxel_size, origin)


def excluded_volume(atoms, voxel_size: float = 0.5, grid=None, table=None, chunk: int = 512) -> Grid3:
    """Fraction of each voxel displaced by atoms (sum of smooth VdW spheres).

    Each sphere is sampled on a ~1 A lattice aligned with the voxel grid,
    binned into voxels and normalised so that it displaces exactly
    ``4/3 pi r_vdw^3`` times the atom's occupancy.
    """
    table = load_scattering_table() if table is None else table
    shape, origin = _resolve_grid(atoms, voxel_size, grid)
    pos, occ, els = atoms_to_arrays(atoms)
    table.require(els)
    v = voxel_size * 10.0
    sub = max(1, int(math.ceil(v / 1.0)))
    fv = v / sub
    out = np.zeros(int(np.prod(shape)))
    if len(pos):
        radius = np.array([table[e].vdw_radius for e in els])
        target = 4.0 / 3.0 * np.pi * radius**3
        # one window for every element keeps each atom's footprint independent of the others
        cut = max(e.vdw_radius for e in table.values()) + 3.0 * EXCLUSION_EDGE
        wf = int(math.ceil(2.0 * cut / fv)) + 1
        rel_all = pos - np.array(origin) * 10.0
        nx, ny, nz = shape
        for s in range(0, len(pos), chunk):
            sl = slice(s, s + chunk)
            rel = rel_all[sl]
            fi = np.floor((rel - cut) / fv).astype(int)[:, :, None] + np.arange(wf)  # (n, 3, wf)
            d = (fi + 0.5) * fv - rel[:, :, None]
            r = np.sqrt(d[:, 0, :, None, None] ** 2 + d[:, 1, None, :, None] ** 2 + d[:, 2, None, None, :] ** 2)
            sph = 0.5 * erfc((r - radius[sl, None, None, None]) / EXCLUSION_EDGE)
            total = sph.sum(axis=(1, 2, 3)) * fv**3
            scale = np.where(total > 0, target[sl] / np.where(total > 0, total, 1.0), 0.0)
            vals = sph * (scale * occ[sl] * (fv / v) ** 3)[:, None, None, None]
            ci = fi // sub
            ok = (ci >= 0) & (ci < np.array(shape)[None, :, None])
            flat = (ci[:, 0, :, None, None] * ny + ci[:, 1, None, :, None]) * nz + ci[:, 2, None, None, :]
            m = ok[:, 0, :, None, None] & ok[:, 1, None, :, None] & ok[:, 2, None, None, :]
            out += np.bincount(flat[m], weights=vals[m], minlength=nx * ny * nz)
    return Grid3(out.reshape(shape), voxel_size, origin)


def electrostatic_potential(
    atoms,
    voxel_size: float = 0.5,
    ice_potential: float = ICE_POTENTIAL,
    grid=None,
    solvent_exclusion: bool = True,
    table=None,
) -> Grid3:
    """Elastic interaction potential (V) of a set of atoms.

    ``grid`` is an optional ``(shape, origin_nm)`` pair; by default the grid
    is fitted to the atoms with a 1 nm margin.
    """
    table = load_scattering_table() if table is None else table
    shape, origin = _resolve_grid(atoms, voxel_size, grid)
    g = gaussian_potential(atoms, voxel_size, (shape, origin), table)
    if not solvent_exclusion or ice_potential == 0:
        return g
    ex = excluded_volume(atoms, voxel_size, (shape, origin), table)
    return g.replace(g.data - ice_potential * ex.data)


def absorption_potential(molecule_kind: str, shape: Grid3) -> Grid3:
    """Absorption potential: a material constant times a [0, 1] shape mask."""
    materials = load_materials()
    if molecule_kind not in materials:
        raise KeyError(f"unknown material {molecule_kind!r}; known: {sorted(materials)}")
    m = np.asarray(shape.data)
    if m.size and (m.min() < -1e-12 or m.max() > 1 + 1e-12):
        raise ValueError("shape mask must lie in [0, 1]")
    return shape.replace(materials[molecule_kind][1] * m)


@dataclass(frozen=True)
class PotentialMap:
    """Elastic (V) and absorptive (dimensionless) potential of one object.

    For catalogue molecules both parts are stored relative to the ice they
    displace, so the ice background can be added to a whole grandmodel
    afterwards. ``shape`` is the occupied-volume fraction in [0, 1].
    """

    v_el: Grid3
    v_ab: Grid3
    shape: Grid3 | None = None
    kind: str = "protein"

    def __post_init__(self):
        if self.v_el.dims != self.v_ab.dims or self.v_el.voxel_size != self.v_ab.voxel_size:
            raise ValueError("v_el and v_ab must share dims and voxel size")
        if not (np.all(np.isfinite(self.v_el.data)) and np.all(np.isfinite(self.v_ab.data))):
            raise ValueError("potential contains non-finite values")

    @property
    def voxel_size(self) -> float:
        return self.v_el.voxel_size


def molecule_potential(atoms, voxel_size: float = 0.5, kind: str = "protein", table=None) -> PotentialMap:
    """Paired potentials of a molecule on an auto-sized grid."""
    table = load_scattering_table() if table is None else table
    shape, origin = grid_for_atoms(atoms, voxel_size)
    g = gaussian_potential(atoms, voxel_size, (shape, origin), table)
    ex = excluded_volume(atoms, voxel_size, (shape, origin), table)
    v_el = g.replace(g.data - ICE_POTENTIAL * ex.data)
    mask = ex.replace(np.clip(ex.data, 0.0, 1.0))
    ab = absorption_potential(kind, mask).data - absorption_potential("ice", mask).data
    return PotentialMap(v_el, mask.replace(ab), mask, kind)


def _smooth_step(r: np.ndarray, radius: float, edge: float) -> np.ndarray:
    return 0.5 * erfc((r - radius) / edge)


def sphere_potential(
    radius: float,
    material: str,
    voxel_size: float = 0.5,
    wall: float | None = None,
    edge: float = 0.5,
) -> PotentialMap:
    """Uniform ball (or spherical shell of thickness ``wall``) of a material.

    Used for gold fiducials and vesicle membranes. Sizes in nm.
    """
    materials = load_materials()
    el, _ = materials[material]
    n = int(math.ceil(2 * (radius + 3 * edge + voxel_size) / voxel_size))
    n += 1 - n % 2
    c = (np.arange(n) - n // 2) * voxel_size
    r = np.sqrt(c[:, None, None] ** 2 + c[None, :, None] ** 2 + c[None, None, :] ** 2)
    shape = _smooth_step(r, radius, edge)
    if wall is not None:
        shape = shape - _smooth_step(r, radius - wall, edge)
    origin = tuple(-0.5 * n * voxel_size for _ in range(3))
    mask = Grid3(np.clip(shape, 0.0, 1.0), voxel_size, origin)
    v_el = mask.replace((el - ICE_POTENTIAL) * mask.data)
    ab = absorption_potential(material, mask).data - absorption_potential("ice", mask).data
    return PotentialMap(v_el, mask.replace(ab), mask, material)


# ---------------------------------------------------------------------------
# shape descriptors


@dataclass(frozen=True)
class ShapeDescriptors:
    volume: float  # nm^3
    area: float  # nm^2
    sphericity: float
    effective_radius: float  # nm
    molecular_weight: float | None = None  # kDa


def descriptors_from_volume_area(volume: float, area: float, molecular_weight: float | None = None) -> ShapeDescriptors:
    if volume <= 0 or area <= 0:
        raise ValueError("volume and area must be positive")
    psi = math.pi ** (1.0 / 3.0) * (6.0 * volume) ** (2.0 / 3.0) / area
    if psi > 1.05:
        log.warning("sphericity %.3f exceeds 1 beyond mesh tolerance", psi)
    return ShapeDescriptors(volume, area, psi, 3.0 * volume / area, molecular_weight)


def shape_descriptors(density: Grid3, threshold: float = 0.5, molecular_weight: float | None = None) -> ShapeDescriptors:
    """Volume, surface area, sphericity and effective radius of a density.

    The density is normalised to a maximum of 1 and a marching-cubes
    isosurface is extracted at ``threshold``; volume (enclosed by the
    closed mesh) and area both come from that surface, so the sphericity
    cannot exceed one.
    """
    from skimage import measure

    d = np.asarray(density.data, dtype=float)
    peak = d.max()
    if not peak > 0:
        raise ValueError("density has no positive values")
    d = d / peak
    inside = d > threshold
    if not inside.any():
        raise ValueError("no voxels above threshold")
    vs = density.voxel_size
    padded = np.pad(d, 1, constant_values=0.0)
    verts, faces, _, _ = measure.marching_cubes(padded, level=threshold, spacing=(vs, vs, vs))
    area = float(measure.mesh_surface_area(verts, faces))
    tri = verts[faces]
    volume = abs(float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum())) / 6.0
    return descriptors_from_volume_area(volume, area, molecular_weight)


def molecular_weight(atoms, table=None) -> float:
    """Sum of atomic masses in kDa (hydrogens only if present in the file)."""
    table = load_scattering_table() if table is None else table
    table.require(a.element for a in atoms)
    return sum(table[a.element].mass * a.occupancy for a in atoms) / 1000.0
