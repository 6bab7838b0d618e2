"""Detection benchmark: match predictions to ground truth and score them.

Predictions are matched by occupancy-mask containment: a prediction hits
the particle whose occupied voxels contain its (rounded) position. The
first hit on a particle is a true positive, later hits on the same particle
are multiple hits, and hits on background are false positives.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .catalog import SIZE_GROUPS, order_by_weight, weight_of

log = logging.getLogger(__name__)

BACKGROUND = "background"
TABLE_COLUMNS = ("RR", "TP", "FP", "FN", "MH", "AD", "Recall", "Precision", "Miss rate", "F1")


class ListParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


# ---------------------------------------------------------------------------
# inputs


@dataclass(frozen=True)
class Prediction:
    class_id: str
    position: tuple  # voxels
    score: float | None = None


@dataclass
class PredictionSet:
    entries: list
    source: str = ""

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class TruthParticle:
    class_id: str
    position: tuple  # voxels
    angles: tuple = (0.0, 0.0, 0.0)  # ZXZ degrees


def _lines(text_or_path):
    if isinstance(text_or_path, Path) or (isinstance(text_or_path, str) and "\n" not in text_or_path and Path(text_or_path).is_file()):
        text_or_path = Path(text_or_path).read_text()
    for i, line in enumerate(text_or_path.splitlines(), 1):
        s = line.strip()
        if s and not s.startswith("#"):
            yield i, s.split()


def read_predictions(text_or_path, source: str = "") -> PredictionSet:
    """Parse ``class x y z [score]`` lines."""
    out = []
    for i, tok in _lines(text_or_path):
        if len(tok) not in (4, 5):
            raise ListParseError(i, f"expected 'class x y z [score]', got {len(tok)} fields")
        try:
            vals = [float(t) for t in tok[1:]]
        except ValueError as exc:
            raise ListParseError(i, str(exc)) from None
        out.append(Prediction(tok[0], tuple(vals[:3]), vals[3] if len(vals) == 4 else None))
    return PredictionSet(out, source)


def read_particle_list(text_or_path) -> list:
    """Parse ``class x y z phi theta psi`` lines; line ``i`` is instance ``i``."""
    out = []
    for i, tok in _lines(text_or_path):
        if len(tok) != 7:
            raise ListParseError(i, f"expected 'class x y z phi theta psi', got {len(tok)} fields")
        try:
            vals = [float(t) for t in tok[1:]]
        except ValueError as exc:
            raise ListParseError(i, str(exc)) from None
        out.append(TruthParticle(tok[0], tuple(vals[:3]), tuple(vals[3:])))
    return out


def format_predictions(preds) -> str:
    entries = preds.entries if isinstance(preds, PredictionSet) else preds
    lines = []
    for p in entries:
        vals = " ".join(repr(float(v)) for v in p.position)
        lines.append(f"{p.class_id} {vals}" + ("" if p.score is None else f" {p.score!r}"))
    return "\n".join(lines) + ("\n" if lines else "")


@dataclass
class GroundTruth:
    """Occupancy mask (instance ids, 0 = background) and instance records.

    ``particles[k - 1]`` describes the instance labelled ``k`` in the mask.
    """

    occupancy: np.ndarray | None
    particles: list

    def __post_init__(self):
        if self.occupancy is not None:
            self.occupancy = np.asarray(self.occupancy)

    @property
    def n(self) -> int:
        return len(self.particles)

    def class_of(self, iid: int) -> str:
        return self.particles[iid - 1].class_id

    @classmethod
    def from_model(cls, model, bin_factor: int = 2) -> "GroundTruth":
        from .phantom import export_ground_truth

        _, occ = model.labels_at(bin_factor)
        return cls(np.asarray(occ.data), read_particle_list(export_ground_truth(model, bin_factor)))


# ---------------------------------------------------------------------------
# matching


@dataclass
class MatchReport:
    RR: int
    TP: int
    FP: int
    FN: int
    MH: int
    AD: float
    assignments: list  # per prediction: (status, instance id or None)
    n_truth: int
    extra_hits: int = 0
    canonical: bool = True

    def __post_init__(self):
        assert self.TP + self.FN == self.n_truth
        assert self.RR == self.TP + self.FP + self.extra_hits


def _lookup(occ: np.ndarray, pos) -> int | None:
    idx = tuple(int(round(float(c))) for c in pos)
    if len(idx) != occ.ndim or any(i < 0 or i >= n for i, n in zip(idx, occ.shape)):
        return None
    return int(occ[idx])


def _tally(preds, gt: GroundTruth, hit_of, exclusions, canonical=True) -> MatchReport:
    excl = set(exclusions or ())
    keep_ids = [i + 1 for i, p in enumerate(gt.particles) if p.class_id not in excl]
    keep = set(keep_ids)
    seen = {}
    dists = []
    assignments = []
    tp = fp = extra = 0
    oob = 0
    for p in preds.entries:
        if p.class_id in excl:
            assignments.append(("ignored", None))
            continue
        iid = hit_of(p)
        if iid is None:
            oob += 1
            fp += 1
            assignments.append(("FP", None))
            continue
        if iid == 0:
            fp += 1
            assignments.append(("FP", None))
            continue
        if iid not in keep:
            assignments.append(("ignored", iid))
            continue
        seen[iid] = seen.get(iid, 0) + 1
        if seen[iid] == 1:
            tp += 1
            dists.append(math.dist(p.position, gt.particles[iid - 1].position))
            assignments.append(("TP", iid))
        else:
            extra += 1
            assignments.append(("MH", iid))
    if oob:
        log.warning("%d predictions outside the tomogram counted as false positives", oob)
    mh = sum(1 for v in seen.values() if v > 1)
    ad = float(np.mean(dists)) if dists else float("nan")
    return MatchReport(tp + fp + extra, tp, fp, len(keep) - tp, mh, ad, assignments, len(keep), extra, canonical)


def match_predictions(preds: PredictionSet, gt: GroundTruth, exclusions=()) -> MatchReport:
    """Class-agnostic localisation matching by occupancy-mask containment.

    Predictions of excluded classes, and predictions landing on particles of
    excluded classes, are dropped before counting. Out-of-volume predictions
    count as false positives.
    """
    if gt.occupancy is None:
        raise ValueError("ground truth has no occupancy mask; use match_by_radius")
    return _tally(preds, gt, lambda p: _lookup(gt.occupancy, p.position), exclusions)


def match_by_radius(preds: PredictionSet, gt: GroundTruth, radius: float, exclusions=()) -> MatchReport:
    """Fallback matcher for data without masks: a prediction hits the nearest
    particle centre within ``radius`` voxels. Not the canonical rule."""
    centres = np.array([p.position for p in gt.particles], dtype=float).reshape(-1, 3)

    def hit(p):
        if not len(centres):
            return 0
        d = np.sqrt(((centres - np.asarray(p.position, dtype=float)) ** 2).sum(axis=1))
        i = int(np.argmin(d))
        return i + 1 if d[i] <= radius else 0

    return _tally(preds, gt, hit, exclusions, canonical=False)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    miss_rate: float
    match: MatchReport | None = None
    per_class: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)
    confusion: "ConfusionMatrix | None" = None
    cumulative: list = field(default_factory=list)
    flags: list = field(default_factory=list)


def f1_score(precision: float, recall: float) -> float:
    s = precision + recall
    return 0.0 if s == 0 else 2.0 * precision * recall / s


def metrics_from_counts(rr: int, tp: int, fn: int, n_truth: int | None = None) -> tuple:
    """(recall, precision, miss rate, F1). Recall uses ``n_truth`` when
    given, else ``tp + fn``; precision is 0 when nothing was reported."""
    n = tp + fn if n_truth is None else n_truth
    recall = tp / n if n > 0 else 0.0
    precision = tp / rr if rr > 0 else 0.0
    return recall, precision, 1.0 - recall, f1_score(precision, recall)


def compute_metrics(report: MatchReport, n_truth: int | None = None) -> MetricsReport:
    recall, precision, miss, f1 = metrics_from_counts(report.RR, report.TP, report.FN, n_truth)
    return MetricsReport(precision, recall, f1, miss, report)


@dataclass(frozen=True)
class PublishedRow:
    method: str
    RR: int
    TP: int
    FN: int
    recall: float
    precision: float
    miss_rate: float
    f1: float


def rederive_published_row(row: PublishedRow, n_truth: int, tol: float = 0.001) -> MetricsReport:
    """Recompute a published row from its raw counts and flag disagreements,
    including rows whose recall and miss rate do not sum to one."""
    recall, precision, miss, f1 = metrics_from_counts(row.RR, row.TP, row.FN, n_truth)
    flags = []
    if abs(row.recall + row.miss_rate - 1.0) > tol:
        flags.append(f"{row.method}: recall {row.recall} + miss rate {row.miss_rate} != 1")
    for name, mine, theirs in (("recall", recall, row.recall), ("precision", precision, row.precision), ("miss rate", miss, row.miss_rate), ("F1", f1, row.f1)):
        if abs(mine - theirs) > tol:
            flags.append(f"{row.method}: {name} {theirs} differs from recomputed {mine:.4f}")
    return MetricsReport(precision, recall, f1, miss, flags=flags)


# ---------------------------------------------------------------------------
# classification


def _classes(preds, gt, classes, exclusions):
    excl = set(exclusions or ())
    if classes is None:
        classes = {p.class_id for p in gt.particles} | {p.class_id for p in preds.entries}
    return [c for c in classes if c not in excl]


def per_class_counts(preds: PredictionSet, gt: GroundTruth, class_id: str) -> MatchReport:
    """Matching restricted to one class: predictions labelled ``class_id``
    against particles of ``class_id``. A hit on another class is a false
    positive for this class."""
    sub = PredictionSet([p for p in preds.entries if p.class_id == class_id])
    others = {p.class_id for p in gt.particles if p.class_id != class_id}
    if gt.occupancy is None:
        raise ValueError("ground truth has no occupancy mask")
    ids = np.array([0] + [1 if p.class_id == class_id else 0 for p in gt.particles])

    def hit(p):
        iid = _lookup(gt.occupancy, p.position)
        if iid is None or iid == 0:
            return iid
        return iid if ids[iid] else 0

    return _tally(sub, gt, hit, others)


def per_class_f1(preds: PredictionSet, gt: GroundTruth, classes=None, exclusions=()) -> dict:
    """F1 per class; ``None`` marks classes absent from the ground truth."""
    out = {}
    present = {p.class_id for p in gt.particles}
    for c in order_by_weight(_classes(preds, gt, classes, exclusions)):
        if c not in present:
            out[c] = None
            continue
        r = per_class_counts(preds, gt, c)
        out[c] = metrics_from_counts(r.RR, r.TP, r.FN)[3]
    return out


def group_f1(per_class: dict, weights: dict | None = None, groups=SIZE_GROUPS) -> dict:
    """Mean F1 of the classes in each molecular-weight group. Classes
    without a known weight (e.g. fiducials) or without a score are skipped;
    empty groups map to ``None``."""
    members = {name: [] for name, _, _ in groups}
    for c, f in per_class.items():
        w = weight_of(c, weights)
        if f is None or not math.isfinite(w):
            continue
        for name, lo, hi in groups:
            if lo <= w < hi:
                members[name].append(f)
    return {k: (float(np.mean(v)) if v else None) for k, v in members.items()}


def cumulative_f1(per_class: dict, weights: dict | None = None) -> list:
    """Running sum of per-class F1 in ascending molecular weight."""
    total = 0.0
    out = []
    for c in order_by_weight(per_class, weights):
        total += per_class[c] or 0.0
        out.append((c, total))
    return out


@dataclass
class ConfusionMatrix:
    rows: list  # true classes ordered by weight, then background
    cols: list  # predicted classes ordered by weight
    counts: np.ndarray

    def as_dict(self) -> dict:
        return {r: {c: int(self.counts[i, j]) for j, c in enumerate(self.cols)} for i, r in enumerate(self.rows)}


def confusion_matrix(preds: PredictionSet, gt: GroundTruth, classes=None, exclusions=()) -> ConfusionMatrix:
    """Counts of (true class of the hit particle, predicted class) over all
    predictions; predictions on background land in the last row."""
    cls = order_by_weight(_classes(preds, gt, classes, exclusions))
    rows = cls + [BACKGROUND]
    col_ix = {c: j for j, c in enumerate(cls)}
    row_ix = {c: i for i, c in enumerate(rows)}
    m = np.zeros((len(rows), len(cls)), dtype=int)
    excl = set(exclusions or ())
    for p in preds.entries:
        if p.class_id not in col_ix:
            continue
        iid = _lookup(gt.occupancy, p.position) if gt.occupancy is not None else None
        if iid:
            t = gt.class_of(iid)
            if t in excl:
                continue
            r = row_ix.get(t)
            if r is None:
                continue
        else:
            r = row_ix[BACKGROUND]
        m[r, col_ix[p.class_id]] += 1
    return ConfusionMatrix(rows, cls, m)


def evaluate(preds: PredictionSet, gt: GroundTruth, classes=None, exclusions=(), n_truth: int | None = None) -> MetricsReport:
    """Full report: localisation metrics, per-class and group F1,
    confusion matrix and cumulative F1."""
    rep = compute_metrics(match_predictions(preds, gt, exclusions), n_truth)
    rep.per_class = per_class_f1(preds, gt, classes, exclusions)
    rep.groups = group_f1(rep.per_class)
    rep.confusion = confusion_matrix(preds, gt, classes, exclusions)
    rep.cumulative = cumulative_f1(rep.per_class)
    return rep


# ---------------------------------------------------------------------------
# report output


def _num(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return None
    return v


def report_dict(rep: MetricsReport) -> dict:
    m = rep.match
    loc = {}
    if m is not None:
        loc.update({"RR": m.RR, "TP": m.TP, "FP": m.FP, "FN": m.FN, "MH": m.MH, "AD": _num(m.AD)})
    loc.update({"Recall": rep.recall, "Precision": rep.precision, "Miss rate": rep.miss_rate, "F1": rep.f1})
    out = {"localization": loc, "classification": {k: _num(v) for k, v in rep.per_class.items()}, "size_groups": rep.groups}
    if rep.confusion is not None:
        out["confusion"] = rep.confusion.as_dict()
    if rep.cumulative:
        out["cumulative_f1"] = [[c, v] for c, v in rep.cumulative]
    if m is not None and not m.canonical:
        out["matcher"] = "radius (non-canonical)"
    if rep.flags:
        out["flags"] = rep.flags
    return out


def format_report(rep: MetricsReport) -> str:
    d = report_dict(rep)
    loc = d["localization"]

    def fmt(v):
        if v is None:
            return "n/a"
        return f"{v:.3f}" if isinstance(v, float) else str(v)

    lines = ["Localization", "  " + "  ".join(f"{k:>9}" for k in loc), "  " + "  ".join(f"{fmt(v):>9}" for v in loc.values())]
    if d["classification"]:
        lines += ["", "Classification F1"]
        lines += [f"  {c:<12} {fmt(v)}" for c, v in d["classification"].items()]
    if d["size_groups"]:
        lines += ["", "Size groups"]
        lines += [f"  {g:<12} {fmt(v)}" for g, v in d["size_groups"].items()]
    if rep.confusion is not None and rep.confusion.cols:
        cm = rep.confusion
        w = max(len(c) for c in cm.rows + cm.cols) + 1
        lines += ["", "Confusion (rows: true, cols: predicted)", " " * w + "".join(f"{c:>{w}}" for c in cm.cols)]
        lines += [f"{r:<{w}}" + "".join(f"{int(v):>{w}}" for v in cm.counts[i]) for i, r in enumerate(cm.rows)]
    return "\n".join(lines) + "\n"


def write_report(rep: MetricsReport, stem) -> None:
    stem = Path(stem)
    stem.with_suffix(".txt").write_text(format_report(rep))
    stem.with_suffix(".json").write_text(json.dumps(report_dict(rep), indent=2) + "\n")
