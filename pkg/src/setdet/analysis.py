"""Diagnostics: attention sparsity, matching instability, duplicates and AP."""

import csv
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractViolation
from .geometry import pairwise_iou
from .synth import LARGE_AREA, SMALL_AREA

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100
SIZE_RANGES = {"s": (0.0, SMALL_AREA), "m": (SMALL_AREA, LARGE_AREA), "l": (LARGE_AREA, np.inf)}


# ------------------------------------------------------------------ sparsity

def row_sparsity(weights, key_mask=None, variant="paper"):
    """Per-row ``(1/m) sum_j p log p`` (``paper``) or ``sum_j p log p`` (``entropy``).

    ``weights`` is ``(..., n, m)``; ``key_mask`` broadcasts against it with
    ``True`` for real targets. Masked targets are excluded from both the sum
    and ``m``. Uses the natural log and ``0 log 0 = 0``.
    """
    if variant not in ("paper", "entropy"):
        raise ContractViolation(f"unknown sparsity variant {variant!r}")
    w = np.asarray(weights, dtype=np.float64)
    valid = np.ones(w.shape, bool) if key_mask is None else np.broadcast_to(key_mask, w.shape)
    p = np.where(valid, w, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    s = plogp.sum(-1)
    if variant == "paper":
        m = valid.sum(-1)
        s = s / np.maximum(m, 1)
    return s


def _map_rows(amap, variant):
    w = amap.weights
    key = None if amap.key_mask is None else np.asarray(amap.key_mask, bool)[:, None, None, :]
    s = row_sparsity(w, key, variant)  # (B, H, n)
    rows = np.ones(s.shape, bool)
    if amap.query_mask is not None:
        rows = np.broadcast_to(np.asarray(amap.query_mask, bool)[:, None, :], s.shape)
    return s, rows


def attention_sparsity(amap, variant="paper"):
    """Mean sparsity over heads and unmasked source positions of one map."""
    s, rows = _map_rows(amap, variant)
    return float(s[rows].mean())


class SparsityPool:
    """Pools row sparsity per (layer, kind) across many batches."""

    def __init__(self, variant="paper"):
        self.variant = variant
        self.sums = {}
        self.counts = {}

    def add(self, maps):
        for amap in maps:
            s, rows = _map_rows(amap, self.variant)
            key = (amap.layer, amap.kind)
            self.sums[key] = self.sums.get(key, 0.0) + float(s[rows].sum())
            self.counts[key] = self.counts.get(key, 0) + int(rows.sum())

    def report(self):
        return {k: self.sums[k] / self.counts[k] for k in sorted(self.sums, key=lambda t: (t[1], t[0]))}


# --------------------------------------------------------------- instability

def matching_instability(prev, curr):
    """Fraction of real objects whose matched prediction changed.

    Inputs are per-object prediction ids (object order), as arrays or as
    ``(Matching, m)`` pairs.
    """
    prev, curr = _assignment(prev), _assignment(curr)
    if prev.shape != curr.shape:
        raise ContractViolation(f"object counts differ: {prev.shape} vs {curr.shape}")
    if prev.size == 0:
        return 0.0
    return float(np.mean(prev != curr))


def _assignment(x):
    if isinstance(x, tuple) and len(x) == 2 and hasattr(x[0], "sigma"):
        return np.asarray(x[0].sigma[:x[1]])
    return np.asarray(x)


def pooled_instability(prev, curr):
    """Object-weighted instability between two epochs' per-scene assignments."""
    changed = total = 0
    for key, a in curr.items():
        if key not in prev:
            continue
        b = prev[key]
        if a.shape != b.shape:
            raise ContractViolation(f"scene {key}: object counts differ")
        changed += int((a != b).sum())
        total += a.size
    return changed / total if total else 0.0


# ------------------------------------------------------------- distillation

def distill_matching(teacher, sample, loss_cfg=None):
    """Teacher's optimal matching on a scene, evaluated without dropout."""
    from .detectors import teacher_matching
    from .losses import LossConfig
    return teacher_matching(teacher, sample, loss_cfg or LossConfig())


# ---------------------------------------------------------------- duplicates

def duplicate_rate(dets, conf_threshold=0.5, iou_threshold=0.5):
    """Fraction of confident predictions that have a same-class twin with
    IoU above ``iou_threshold``. ``dets`` is ``(scores, labels, boxes)``."""
    scores, labels, boxes = (np.asarray(a) for a in dets)
    keep = scores >= conf_threshold
    if keep.sum() == 0:
        return 0.0
    labels, boxes = labels[keep], np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[keep]
    same = labels[:, None] == labels[None, :]
    overlap = pairwise_iou(boxes, boxes) > iou_threshold
    np.fill_diagonal(overlap, False)
    return float((same & overlap).any(1).mean())


# ------------------------------------------------------------------------ AP

@dataclass
class EvalReport:
    """COCO-style AP; a size bucket without objects reports NaN."""

    AP: float
    AP50: float
    AP75: float
    AP_s: float
    AP_m: float
    AP_l: float

    def as_dict(self):
        return asdict(self)


def _interp_precision(tp, n_gt):
    """101-point interpolated precision for a score-sorted hit list."""
    if n_gt == 0:
        return None
    if len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(~tp)
    recall = tps / n_gt
    precision = tps / np.maximum(tps + fps, np.finfo(float).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def _match_image(ious, d_area, g_ignore, thresholds, area_rng):
    """Greedy COCO matching of score-sorted detections at every threshold.

    Returns per-threshold labels for each detection: 1 true positive,
    0 false positive, -1 ignored.
    """
    T, (D, G) = len(thresholds), ious.shape
    out = np.zeros((T, D), dtype=np.int8)
    matched = np.zeros((T, G), dtype=bool)
    lo, hi = area_rng
    outside = (d_area < lo) | (d_area >= hi)
    if G == 0:
        out[:, outside] = -1
        return out
    rows = np.arange(T)
    for j in range(D):
        cand = ~matched & (ious[j][None, :] >= thresholds[:, None])
        real = cand & ~g_ignore[None, :]
        use = np.where(real.any(1)[:, None], real, cand)
        score = np.where(use, ious[j][None, :], -1.0)
        best = score.argmax(1)
        hit = use[rows, best]
        matched[rows[hit], best[hit]] = True
        ign = g_ignore[best]
        out[:, j] = np.where(hit, np.where(ign, -1, 1), np.where(outside[j], -1, 0))
    return out


def _class_ap(dets, gts, cls, thresholds, area_rng):
    """Per-threshold AP for one class and area range (None without objects)."""
    lo, hi = area_rng
    scores, labels, n_gt = [], [], 0
    for (sc, lb, boxes), (gb, gl) in zip(dets, gts):
        d_sel = np.nonzero(lb == cls)[0]
        d_sel = d_sel[np.argsort(-sc[d_sel], kind="stable")][:MAX_DETS]
        g_sel = np.nonzero(gl == cls)[0]
        g_area = gb[g_sel, 2] * gb[g_sel, 3]
        g_ignore = (g_area < lo) | (g_area >= hi)
        n_gt += int((~g_ignore).sum())
        if not len(d_sel):
            continue
        db = boxes[d_sel]
        ious = pairwise_iou(db, gb[g_sel]) if len(g_sel) else np.zeros((len(d_sel), 0))
        labels.append(_match_image(ious, db[:, 2] * db[:, 3], g_ignore, thresholds, area_rng))
        scores.append(sc[d_sel])
    if n_gt == 0:
        return None
    if not scores:
        return [0.0] * len(thresholds)
    order = np.argsort(-np.concatenate(scores), kind="stable")
    lab = np.concatenate(labels, axis=1)[:, order]
    return [_interp_precision(row[row >= 0] == 1, n_gt) for row in lab]


def _mean_ap(dets, gts, classes, thresholds, area_rng):
    thresholds = np.asarray(thresholds, dtype=float)
    per_cls = [_class_ap(dets, gts, c, thresholds, area_rng) for c in classes]
    per_cls = np.array([v for v in per_cls if v is not None])
    return float(per_cls.mean()) if per_cls.size else float("nan")


def evaluate_ap(dets, gts, n_classes=None):
    """COCO-style AP over images.

    ``dets``: per image ``(scores, labels, boxes)``; ``gts``: per image
    ``(boxes, labels)``. Boxes are cxcywh in the unit square.
    """
    dets = [tuple(np.asarray(a, dtype=float if i != 1 else np.int64) for i, a in enumerate(d)) for d in dets]
    dets = [(s, l, b.reshape(-1, 4)) for s, l, b in dets]
    gts = [(np.asarray(b, float).reshape(-1, 4), np.asarray(l, np.int64)) for b, l in gts]
    if len(dets) != len(gts):
        raise ContractViolation("detections and ground truth cover different images")
    if n_classes is None:
        labels = [l for _, l in gts] + [l for _, l, _ in dets]
        n_classes = int(max((l.max() for l in labels if l.size), default=-1)) + 1
    classes = range(n_classes)
    full = (0.0, np.inf)
    per_cls = [_class_ap(dets, gts, c, IOU_THRESHOLDS, full) for c in classes]
    per_cls = np.array([v for v in per_cls if v is not None]).reshape(-1, len(IOU_THRESHOLDS))
    nan = float("nan")
    return EvalReport(
        AP=float(per_cls.mean()) if per_cls.size else nan,
        AP50=float(per_cls[:, 0].mean()) if per_cls.size else nan,
        AP75=float(per_cls[:, 5].mean()) if per_cls.size else nan,
        AP_s=_mean_ap(dets, gts, classes, IOU_THRESHOLDS, SIZE_RANGES["s"]),
        AP_m=_mean_ap(dets, gts, classes, IOU_THRESHOLDS, SIZE_RANGES["m"]),
        AP_l=_mean_ap(dets, gts, classes, IOU_THRESHOLDS, SIZE_RANGES["l"]),
    )


# ----------------------------------------------------------------------- CSV

def write_csv(path, header, rows):
    """Rows are dicts keyed by header names; floats are written with repr."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row.get(h, "")) for h in header])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
