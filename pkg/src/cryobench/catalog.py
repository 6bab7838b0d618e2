"""Particle classes of the benchmark and synthetic stand-in structures.

``PROTEIN_CLASSES`` lists the twelve benchmark complexes with molecular
weight and the volume/area/sphericity/effective-radius values of their
thresholded density maps. The atomic models themselves are not shipped;
:func:`synthetic_structure` generates pseudo-atomic blobs so the pipeline
can run without external structure files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .structchem import AtomRecord


@dataclass(frozen=True)
class ClassInfo:
    pdb: str
    name: str
    weight_kda: float
    volume: float  # nm^3
    area: float  # nm^2
    sphericity: float
    effective_radius: float  # nm


PROTEIN_CLASSES = (
    ClassInfo("1s3x", "Hsp70 ATPase", 42.75, 90.82, 109.8, 0.890, 2.481),
    ClassInfo("3qm1", "LJ0536 S106A", 62.62, 127.9, 137.6, 0.892, 2.789),
    ClassInfo("3gl1", "Ssb1, Hsp70", 84.61, 196.5, 191.2, 0.855, 3.083),
    ClassInfo("3h84", "GET3", 158.08, 347.0, 370.9, 0.644, 2.807),
    ClassInfo("2cg9", "Hsp90-Sba1", 188.73, 401.2, 358.4, 0.734, 3.358),
    ClassInfo("3d2f", "Sse1p, Hsp70", 236.11, 516.0, 459.6, 0.677, 3.368),
    ClassInfo("1u6g", "Cand1-Cul1-Roc1", 238.82, 499.3, 450.2, 0.676, 3.327),
    ClassInfo("3cf3", "P97/vcp", 541.74, 1136.0, 745.2, 0.707, 4.573),
    ClassInfo("1bxn", "Rubisco", 559.96, 1021.0, 583.4, 0.840, 5.250),
    ClassInfo("1qvr", "ClpB", 593.36, 1354.0, 1063.0, 0.557, 3.821),
    ClassInfo("4cr2", "26S proteasome", 1309.28, 2675.0, 1846.0, 0.505, 4.347),
    ClassInfo("5mrc", "Yeast mito ribosome", 3325.59, 6372.0, 3161.0, 0.526, 6.047),
)

CLASS_INFO = {c.pdb: c for c in PROTEIN_CLASSES}

# Molecular-weight groups (kDa): small < 200 <= medium < 600 <= large.
SIZE_GROUPS = (("Small", 0.0, 200.0), ("Medium", 200.0, 600.0), ("Large", 600.0, float("inf")))

# Evaluation classes: the twelve proteins plus gold fiducials.
BENCHMARK_CLASSES = tuple(c.pdb for c in PROTEIN_CLASSES) + ("fiducial",)

FIDUCIAL = "fiducial"
VESICLE = "vesicle"


def weight_of(class_id: str, weights: dict | None = None) -> float:
    """Molecular weight used for ordering; unknown classes sort last."""
    if weights and class_id in weights:
        return float(weights[class_id])
    if class_id in CLASS_INFO:
        return CLASS_INFO[class_id].weight_kda
    return float("inf")


def order_by_weight(classes, weights: dict | None = None) -> list:
    return sorted(classes, key=lambda c: (weight_of(c, weights), c))


def size_group(weight_kda: float) -> str:
    for name, lo, hi in SIZE_GROUPS:
        if lo <= weight_kda < hi:
            return name
    raise ValueError(f"weight {weight_kda} outside all groups")


# ---------------------------------------------------------------------------
# synthetic structures

# heavy-atom number density of protein (1.35 g/cm^3, ~14 Da per heavy atom incl. H)
PROTEIN_ATOM_DENSITY = 0.0577  # atoms / Angstrom^3
_COMPOSITION = (("C", 0.63), ("N", 0.17), ("O", 0.19), ("S", 0.01))


@dataclass(frozen=True)
class SyntheticSpec:
    """Pseudo-atomic molecule built from overlapping ellipsoidal lobes.

    ``lobes`` holds ``(cx, cy, cz, ax, ay, az)`` tuples in nm: lobe centre and
    semi-axes.
    """

    name: str
    lobes: tuple
    seed: int = 0


# Stand-ins sized like four benchmark classes (excluded volumes of about 120,
# 400, 1020 and 2670 nm^3, cf. 3qm1, 2cg9, 1bxn and 4cr2) so that a phantom
# has a realistic occupied fraction.
DEFAULT_SYNTHETIC = (
    SyntheticSpec("synA", ((0, 0, 0, 3.4, 3.0, 2.8),), seed=11),
    SyntheticSpec("synB", ((0, 0, -2.8, 4.4, 3.9, 3.7), (0.9, 0, 3.5, 3.3, 3.3, 3.0)), seed=12),
    SyntheticSpec("synC", ((0, 0, 0, 6.6, 6.6, 5.6),), seed=13),
    SyntheticSpec("synD", ((0, 0, 0, 6.7, 6.7, 9.0), (0, 0, -10.8, 6.2, 6.2, 3.1), (0, 0, 10.8, 6.2, 6.2, 3.1)), seed=14),
)


def synthetic_structure(spec: SyntheticSpec) -> list:
    """Atoms on a jittered cubic lattice filling the union of the lobes."""
    rng = np.random.default_rng(spec.seed)
    lobes = np.asarray(spec.lobes, dtype=float) * 10.0  # to Angstrom
    lo = (lobes[:, :3] - lobes[:, 3:]).min(axis=0)
    hi = (lobes[:, :3] + lobes[:, 3:]).max(axis=0)
    step = PROTEIN_ATOM_DENSITY ** (-1.0 / 3.0)
    axes = [np.arange(a, b + step, step) for a, b in zip(lo, hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    pts = pts + rng.uniform(-0.35 * step, 0.35 * step, pts.shape)
    inside = np.zeros(len(pts), dtype=bool)
    for cx, cy, cz, ax, ay, az in lobes:
        inside |= (((pts - (cx, cy, cz)) / (ax, ay, az)) ** 2).sum(axis=1) <= 1.0
    pts = pts[inside]
    elements, probs = zip(*_COMPOSITION)
    els = rng.choice(elements, size=len(pts), p=probs)
    return [AtomRecord(str(e), tuple(float(v) for v in p)) for e, p in zip(els, pts)]
