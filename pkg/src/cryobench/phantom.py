"""Random cell-like grandmodels with class and occupancy ground truth."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from . import rng as rngs
from .catalog import FIDUCIAL, VESICLE
from .structchem import ICE_ABSORPTION, ICE_POTENTIAL, PotentialMap, sphere_potential
from .volume import EulerZXZ, Grid3, _paste_into, rotate_bspline

log = logging.getLogger(__name__)

FOOTPRINT_THRESHOLD = 0.5


class PlacementError(RuntimeError):
    def __init__(self, msg: str, achieved: int):
        super().__init__(f"{msg} (placed {achieved} particles)")
        self.achieved = achieved


@dataclass
class PlacementConfig:
    """Particle counts and geometry of a grandmodel. Lengths in nm.

    Counts are drawn uniformly from the inclusive ranges.
    """

    box: tuple = (512.0, 512.0, 512.0)
    voxel_size: float = 0.5
    protein_range: tuple = (1000, 3000)
    fiducial_range: tuple = (7, 14)
    vesicle_range: tuple = (2, 7)
    fiducial_radius: float = 5.0
    vesicle_radius_range: tuple = (15.0, 30.0)
    vesicle_wall: float = 5.0
    max_attempts: int = 1000


@dataclass(frozen=True)
class ParticleInstance:
    class_id: str
    center: tuple  # nm
    orientation: EulerZXZ
    instance_id: int


@dataclass
class GrandModel:
    potential: PotentialMap
    class_mask: Grid3
    occupancy_mask: Grid3
    instances: list
    classes: list  # class_mask value k (1-based) -> classes[k - 1]
    rng_seed: int = 0
    attempts: dict = field(default_factory=dict)

    def class_index(self, class_id: str) -> int:
        return self.classes.index(class_id) + 1

    def labels_at(self, factor: int) -> tuple:
        """Class and occupancy masks on a grid binned by ``factor``."""
        occ = downsample_labels(self.occupancy_mask, factor)
        lut = np.zeros(len(self.instances) + 1, dtype=np.int32)
        for inst in self.instances:
            lut[inst.instance_id] = self.class_index(inst.class_id)
        cls = occ.replace(lut[np.asarray(occ.data, dtype=np.int64)])
        return cls, occ


def draw_counts(config: PlacementConfig, rng: np.random.Generator) -> dict:
    def draw(r):
        lo, hi = int(r[0]), int(r[1])
        return int(rng.integers(lo, hi + 1)) if hi >= lo else 0

    return {"protein": draw(config.protein_range), FIDUCIAL: draw(config.fiducial_range), VESICLE: draw(config.vesicle_range)}


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrix (normalised Gaussian quaternion)."""
    q = rng.normal(size=4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.normal(size=4)
    return Rotation.from_quat(q / np.linalg.norm(q)).as_matrix()


def random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` uniform rotation matrices, shape ``(n, 3, 3)``."""
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return Rotation.from_quat(q).as_matrix()


def sample_so3(rng: np.random.Generator) -> EulerZXZ:
    return EulerZXZ.from_matrix(random_rotation(rng))


def downsample_labels(mask: Grid3, factor: int) -> Grid3:
    """Majority-vote label downsampling; ties go to the smallest nonzero label."""
    if factor == 1:
        return mask
    a = np.asarray(mask.data)
    for axis, n in zip("xyz", a.shape):
        if n % factor:
            raise ValueError(f"axis {axis} of size {n} is not divisible by {factor}")
    nx, ny, nz = (n // factor for n in a.shape)
    blocks = (
        a.reshape(nx, factor, ny, factor, nz, factor)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(-1, factor**3)
    )
    blocks = np.sort(blocks, axis=1)
    counts = (blocks[:, :, None] == blocks[:, None, :]).sum(axis=2).astype(float)
    counts[blocks == 0] -= 0.5
    pick = blocks[np.arange(len(blocks)), np.argmax(counts, axis=1)]
    return Grid3(pick.reshape(nx, ny, nz), mask.voxel_size * factor, mask.origin)


def _rotated(pm: PotentialMap, R: np.ndarray) -> tuple:
    if pm.shape is None:
        raise ValueError("catalog potentials need a shape mask for footprints")
    v_el = rotate_bspline(pm.v_el, R).data
    v_ab = rotate_bspline(pm.v_ab, R).data
    shape = rotate_bspline(pm.shape, R).data
    return v_el, v_ab, shape > FOOTPRINT_THRESHOLD


def place_particles(catalog: dict, config: PlacementConfig, seed: int) -> GrandModel:
    """Place randomly oriented catalogue particles without overlap.

    ``catalog`` maps protein class ids to their :class:`PotentialMap`.
    Fiducial and vesicle potentials are generated from ``config`` unless the
    catalogue provides them under the ``"fiducial"`` / ``"vesicle"`` keys.
    Larger particles are placed first. Amorphous-ice constants are added to
    the whole box at the end.
    """
    proteins = sorted(k for k in catalog if k not in (FIDUCIAL, VESICLE))
    if not proteins and config.protein_range[1] > 0:
        raise ValueError("catalog contains no protein classes")
    rng = rngs.generator(seed, "placement")
    counts = draw_counts(config, rng)
    vs = config.voxel_size
    for k, pm in catalog.items():
        if abs(pm.voxel_size - vs) > 1e-9:
            raise ValueError(f"catalog entry {k!r} sampled at {pm.voxel_size} nm, expected {vs}")

    items = [(c, catalog[c]) for c in rng.choice(proteins, size=counts["protein"])] if proteins else []
    fid = catalog.get(FIDUCIAL) or sphere_potential(config.fiducial_radius, "gold", vs)
    items += [(FIDUCIAL, fid)] * counts[FIDUCIAL]
    for _ in range(counts[VESICLE]):
        if VESICLE in catalog:
            items.append((VESICLE, catalog[VESICLE]))
        else:
            r = float(rng.uniform(*config.vesicle_radius_range))
            items.append((VESICLE, sphere_potential(r, "membrane", vs, wall=config.vesicle_wall)))
    sizes = [float(np.asarray(pm.shape.data).sum()) for _, pm in items]
    order = sorted(range(len(items)), key=lambda i: -sizes[i])

    shape = tuple(int(round(b / vs)) for b in config.box)
    v_el = np.zeros(shape, dtype=np.float32)
    v_ab = np.zeros(shape, dtype=np.float32)
    occupancy = np.zeros(shape, dtype=np.int32)
    class_mask = np.zeros(shape, dtype=np.int16)
    classes = sorted(set(proteins) | ({FIDUCIAL} if counts[FIDUCIAL] else set()) | ({VESICLE} if counts[VESICLE] else set()))
    instances = []
    tries = {}
    for i in order:
        cid, pm = items[i]
        R = random_rotation(rng)
        el, ab, fp = _rotated(pm, R)
        n = el.shape
        if any(a > b for a, b in zip(n, shape)):
            raise PlacementError(f"particle {cid} larger than the box", len(instances))
        for attempt in range(1, config.max_attempts + 1):
            off = tuple(int(rng.integers(0, s - m + 1)) for s, m in zip(shape, n))
            sl = tuple(slice(o, o + m) for o, m in zip(off, n))
            if not occupancy[sl][fp].any():
                break
        else:
            raise PlacementError(f"could not place {cid} after {config.max_attempts} attempts", len(instances))
        tries[len(instances) + 1] = attempt
        iid = len(instances) + 1
        _paste_into(v_el, el.astype(np.float32), off, "add")
        _paste_into(v_ab, ab.astype(np.float32), off, "add")
        occupancy[sl][fp] = iid
        class_mask[sl][fp] = classes.index(cid) + 1
        # catalogue grids are odd-sized and centred on the molecule
        center = tuple((o + m // 2 + 0.5) * vs for o, m in zip(off, n))
        instances.append(ParticleInstance(cid, center, EulerZXZ.from_matrix(R), iid))
    v_el += np.float32(ICE_POTENTIAL)
    v_ab += np.float32(ICE_ABSORPTION)
    pot = PotentialMap(Grid3(v_el, vs), Grid3(v_ab, vs), None, "grandmodel")
    log.info("placed %d particles (%s)", len(instances), counts)
    return GrandModel(pot, Grid3(class_mask, vs), Grid3(occupancy, vs), instances, classes, seed, tries)


def export_ground_truth(model: GrandModel, bin_factor: int = 2) -> str:
    """One ``class x y z phi theta psi`` line per instance, ordered by
    instance id. Coordinates are voxel indices of the reconstruction grid
    (the grandmodel binned by ``bin_factor``)."""
    vs = model.occupancy_mask.voxel_size * bin_factor
    origin = np.asarray(model.occupancy_mask.origin[:3])
    lines = []
    for inst in sorted(model.instances, key=lambda p: p.instance_id):
        idx = (np.asarray(inst.center) - origin) / vs - 0.5
        vals = list(idx) + list(inst.orientation.as_tuple())
        lines.append(" ".join([inst.class_id] + [repr(float(v)) for v in vals]))
    return "\n".join(lines) + ("\n" if lines else "")
