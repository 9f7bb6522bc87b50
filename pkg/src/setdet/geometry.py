"""Boxes, overlap metrics and coordinate conversions.

Boxes are stored as ``(cx, cy, w, h)`` in normalized image units. The
scalar functions take :class:`Box` (or any 4-sequence); the ``pairwise_*``
functions take ``(N, 4)`` arrays and are what matching and evaluation use.
"""

from typing import NamedTuple

import numpy as np


class Box(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    def is_valid(self):
        return all(0.0 <= v <= 1.0 for v in self)

    @property
    def area(self):
        return self.w * self.h


class LabeledObject(NamedTuple):
    box: Box
    category: int


def to_corner(b):
    cx, cy, w, h = b
    return (cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def from_corner(c):
    x1, y1, x2, y2 = c
    return Box(0.5 * (x1 + x2), 0.5 * (y1 + y2), x2 - x1, y2 - y1)


def to_corner_array(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    half = 0.5 * b[..., 2:]
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def from_corner_array(corners):
    c = np.asarray(corners, dtype=np.float64)
    return np.concatenate([0.5 * (c[..., :2] + c[..., 2:]), c[..., 2:] - c[..., :2]], axis=-1)


def contains(p, b):
    """Closed-rectangle containment of point ``p = (x, y)``."""
    x1, y1, x2, y2 = to_corner(b)
    return bool(x1 <= p[0] <= x2 and y1 <= p[1] <= y2)


def _overlap_terms(a, b):
    # a: (N, 4), b: (M, 4) corner form -> intersection, union, enclosing (N, M)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    ew = np.maximum(a[:, None, 2], b[None, :, 2]) - np.minimum(a[:, None, 0], b[None, :, 0])
    eh = np.maximum(a[:, None, 3], b[None, :, 3]) - np.minimum(a[:, None, 1], b[None, :, 1])
    return inter, union, ew * eh


def pairwise_iou(a, b):
    """IoU between every box of ``a`` and every box of ``b`` (cxcywh)."""
    inter, union, _ = _overlap_terms(to_corner_array(np.reshape(a, (-1, 4))),
                                     to_corner_array(np.reshape(b, (-1, 4))))
    out = np.zeros_like(union)
    ok = union > 0
    out[ok] = inter[ok] / union[ok]
    return out


def pairwise_giou(a, b):
    inter, union, encl = _overlap_terms(to_corner_array(np.reshape(a, (-1, 4))),
                                        to_corner_array(np.reshape(b, (-1, 4))))
    out = np.zeros_like(union)
    ok = union > 0
    out[ok] = inter[ok] / union[ok] - (encl[ok] - union[ok]) / encl[ok]
    return out


def iou(a, b):
    return float(pairwise_iou(np.asarray(a, float), np.asarray(b, float))[0, 0])


def giou(a, b):
    """Generalized IoU; 0 when both boxes have zero area."""
    return float(pairwise_giou(np.asarray(a, float), np.asarray(b, float))[0, 0])


def iou_corner(a, b):
    return iou(from_corner(a), from_corner(b))


def giou_corner(a, b):
    return giou(from_corner(a), from_corner(b))


def clip_box(boxes):
    """Clip cxcywh boxes so their corners lie inside the unit square."""
    c = np.clip(to_corner_array(boxes), 0.0, 1.0)
    return from_corner_array(c)
