"""Shared test helpers."""

import numpy as np

from cryobench.bench import GroundTruth, Prediction, PredictionSet, TruthParticle

TOY_SHAPE = (30, 30, 30)


def fwhm(profile) -> float:
    """Full width at half maximum of a 1D peak, with linear interpolation
    of the half-maximum crossings on either side of the maximum."""
    p = np.asarray(profile, dtype=float)
    i = int(np.argmax(p))
    half = p[i] / 2.0
    left = i
    while left > 0 and p[left - 1] > half:
        left -= 1
    right = i
    while right < len(p) - 1 and p[right + 1] > half:
        right += 1
    xl = left - 1 + (half - p[left - 1]) / (p[left] - p[left - 1]) if left > 0 else 0.0
    xr = right + (p[right] - half) / (p[right] - p[right + 1]) if right < len(p) - 1 else len(p) - 1.0
    return float(xr - xl)


def point_projections(n, point, angles):
    """Exact ray sums of a unit point at voxel ``point`` of an n^3 volume
    tilted about y, split linearly between neighbouring pixels."""
    c = n / 2.0
    x, y, z = (np.asarray(point, dtype=float) + 0.5) - c
    out = []
    for a in angles:
        t = np.deg2rad(a)
        xp = x * np.cos(t) + z * np.sin(t) + c - 0.5
        img = np.zeros((n, n))
        i0 = int(np.floor(xp))
        f = xp - i0
        img[i0, int(point[1])] += 1.0 - f
        if f:
            img[i0 + 1, int(point[1])] += f
        out.append(img)
    return out


def write_pdb(path, atoms):
    """Minimal fixed-column PDB with one ATOM record per atom."""
    lines = []
    for i, a in enumerate(atoms, 1):
        x, y, z = a.position
        name = a.element.upper()
        lines.append(f"ATOM  {i:5d}  {name:<3s} ALA A{i % 10000:4d}    {x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}          {a.element.upper():>2s}")
    path.write_text("\n".join(lines + ["END"]) + "\n")


def direct_ncc(vol, t, m):
    # weighted Pearson correlation of every periodic window against the template
    n = vol.shape
    c = np.array(t.shape) // 2
    P = m.sum()
    tm = (m * t).sum() / P
    td = t - tm
    out = np.zeros(n)
    for p in np.ndindex(*n):
        idx = [(np.arange(s) - c[a] + p[a]) % n[a] for a, s in enumerate(t.shape)]
        w = vol[np.ix_(*idx)]
        wm = (m * w).sum() / P
        wd = w - wm
        num = (m * td * wd).sum()
        den = np.sqrt((m * td**2).sum() * (m * wd**2).sum())
        out[p] = num / den if den > 1e-12 else 0.0
    return out


def toy_truth(boxes, classes=None):
    """Occupancy mask with one axis-aligned box per instance."""
    occ = np.zeros(TOY_SHAPE, dtype=np.int32)
    parts = []
    for k, (lo, hi) in enumerate(boxes, 1):
        occ[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = k
        centre = tuple((a + b - 1) / 2 for a, b in zip(lo, hi))
        parts.append(TruthParticle(classes[k - 1] if classes else "p", centre))
    return GroundTruth(occ, parts)


def make_predictions(items):
    return PredictionSet([Prediction(c, tuple(float(v) for v in p)) for c, p in items])


def bruteforce_match(preds, gt):
    # every prediction tested against every instance's voxel set
    regions = [set(map(tuple, np.argwhere(gt.occupancy == k))) for k in range(1, gt.n + 1)]
    hits = [0] * gt.n
    fp = 0
    for p in preds.entries:
        v = tuple(int(round(c)) for c in p.position)
        owners = [k for k, reg in enumerate(regions) if v in reg]
        if owners:
            hits[owners[0]] += 1
        else:
            fp += 1
    tp = sum(h > 0 for h in hits)
    mh = sum(h > 1 for h in hits)
    extra = sum(max(h - 1, 0) for h in hits)
    return {"RR": len(preds), "TP": tp, "FP": fp, "FN": gt.n - tp, "MH": mh, "extra": extra}


def random_match_instance(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(0, 11))
    boxes = []
    for k in range(n):
        lo = (3 * k, int(r.integers(0, 20)), int(r.integers(0, 20)))
        boxes.append((lo, (lo[0] + 3, lo[1] + int(r.integers(1, 8)), lo[2] + int(r.integers(1, 8)))))
    gt = toy_truth(boxes)
    m = int(r.integers(0, 21))
    pts = r.uniform(-0.5, 29.4, size=(m, 3))
    for i in range(m):
        if n and r.random() < 0.6:  # bias towards hits
            lo, hi = boxes[int(r.integers(n))]
            pts[i] = [r.integers(a, b) for a, b in zip(lo, hi)]
    return gt, make_predictions([("p", p) for p in pts])
