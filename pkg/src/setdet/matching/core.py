"""Bipartite matching between padded ground truth and predictions.

Rows of every cost matrix are ground-truth slots (real objects first, then
no-object padding); columns are predictions. A :class:`Matching` maps slot
``i`` to prediction ``sigma[i]``.
"""

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation, InfeasibleMatchingError
from ..geometry import pairwise_giou, pairwise_iou, to_corner_array

log = logging.getLogger(__name__)

INF_COST = 1e15

if os.environ.get("SETDET_PURE_PYTHON"):
    from ._hungarian_py import solve as _solve
    BACKEND = "python"
else:
    try:
        from ._hungarian import solve as _solve
        BACKEND = "cython"
    except ImportError:  # extension not built
        from ._hungarian_py import solve as _solve
        BACKEND = "python"

# FCOS-style level ranges over the maximum point-to-side distance.
FCOS_LEVEL_BOUNDS = {
    5: (0.0, 0.1, 0.2, 0.4, 0.8, 1.0),
    3: (0.0, 0.1, 0.2, 1.0),
}


def default_level_bounds(n_levels):
    if n_levels in FCOS_LEVEL_BOUNDS:
        return FCOS_LEVEL_BOUNDS[n_levels]
    base = FCOS_LEVEL_BOUNDS[5][:n_levels]
    return tuple(base) + (1.0,)


@dataclass(frozen=True)
class CostWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass
class Matching:
    sigma: np.ndarray
    total_cost: float

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.int64)
        n = self.sigma.size
        if not np.array_equal(np.sort(self.sigma), np.arange(n)):
            raise ContractViolation("sigma is not a permutation")

    @property
    def n(self):
        return self.sigma.size

    def pairs(self, m=None):
        """(slot, prediction) pairs; only real objects when ``m`` is given."""
        rows = range(self.n if m is None else m)
        return [(i, int(self.sigma[i])) for i in rows]


@dataclass(frozen=True)
class PaddedGroundTruth:
    """``m`` real objects padded to ``n`` slots with no-object."""

    boxes: np.ndarray
    labels: np.ndarray
    n: int

    def __post_init__(self):
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(boxes) != len(labels):
            raise ContractViolation("boxes and labels differ in length")
        if len(labels) > self.n:
            raise ContractViolation(f"{len(labels)} objects do not fit in {self.n} slots")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "labels", labels)

    @property
    def m(self):
        return len(self.labels)

    def is_object(self, i):
        return i < self.m

    @classmethod
    def from_objects(cls, objects, n):
        boxes = [tuple(o.box) for o in objects]
        labels = [o.category for o in objects]
        return cls(np.asarray(boxes, dtype=np.float64).reshape(-1, 4), labels, n)

    def with_n(self, n):
        return PaddedGroundTruth(self.boxes, self.labels, n)


@dataclass
class AdmissibilityMask:
    """``allowed[p, g]``: may prediction ``p`` take real object ``g``."""

    allowed: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.allowed = np.asarray(self.allowed, dtype=bool)

    def starved(self):
        """Object columns with no admissible prediction."""
        return [int(g) for g in np.nonzero(~self.allowed.any(axis=0))[0]]


def _as_arrays(preds):
    if hasattr(preds, "detached"):
        preds = preds.detached()
    probs, boxes = preds
    return np.asarray(probs, dtype=np.float64), np.asarray(boxes, dtype=np.float64)


def hungarian(cost):
    """Exact minimum-cost perfect matching of a square cost matrix.

    Entries ``>= INF_COST`` (or non-finite) are forbidden pairs.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ContractViolation(f"cost matrix must be square, got {c.shape}")
    forbidden = ~np.isfinite(c) | (c >= INF_COST)
    c = np.where(forbidden, INF_COST, c)
    dead = np.nonzero(forbidden.all(axis=1))[0] if c.size else []
    if len(dead):
        raise InfeasibleMatchingError(f"rows without finite cost: {list(map(int, dead))}", dead)
    sigma = _solve(np.ascontiguousarray(c)) if c.size else np.zeros(0, dtype=np.int64)
    n = len(sigma)
    bad = [i for i in range(n) if forbidden[i, sigma[i]]]
    if bad:
        raise InfeasibleMatchingError(f"no finite perfect matching; unmatched rows {bad}", bad)
    return Matching(sigma, math.fsum(c[i, sigma[i]] for i in range(n)))


def match_cost(probs, box, gt, weights=CostWeights()):
    """Cost of pairing one prediction with one slot (``gt=None`` for no-object)."""
    probs = np.asarray(probs, dtype=np.float64)
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
        raise ContractViolation("class probabilities must form a distribution")
    if gt is None:
        return 0.0
    gbox, category = gt
    l1 = float(np.abs(np.asarray(box, float) - np.asarray(gbox, float)).sum())
    g = float(pairwise_giou(np.asarray(box, float), np.asarray(gbox, float))[0, 0])
    return weights.cls * (1.0 - probs[category]) + weights.l1 * l1 + weights.giou * (1.0 - g)


def object_costs(probs, boxes, gts, weights=CostWeights()):
    """(M, N) costs of every real object against every prediction."""
    cls = 1.0 - probs[:, gts.labels].T
    l1 = np.abs(gts.boxes[:, None, :] - boxes[None, :, :]).sum(-1)
    g = pairwise_giou(gts.boxes, boxes)
    return weights.cls * cls + weights.l1 * l1 + weights.giou * (1.0 - g)


def cost_matrix(preds, gts, weights=CostWeights()):
    probs, boxes = _as_arrays(preds)
    n = len(probs)
    if gts.n != n:
        raise ContractViolation(f"{n} predictions but {gts.n} ground-truth slots")
    c = np.zeros((n, n))
    if gts.m:
        c[:gts.m] = object_costs(probs, boxes, gts, weights)
    return c


def optimal_match(preds, gts, weights=CostWeights()):
    return hungarian(cost_matrix(preds, gts, weights))


def _level_distance(positions, gts):
    corners = to_corner_array(gts.boxes)
    x = positions[:, None, 0]
    y = positions[:, None, 1]
    left = x - corners[None, :, 0]
    top = y - corners[None, :, 1]
    right = corners[None, :, 2] - x
    bottom = corners[None, :, 3] - y
    dist = np.stack([left, top, right, bottom], axis=-1)
    return dist.min(-1) >= 0, dist.max(-1)


def level_of_distance(dist, bounds):
    """Pyramid level whose range ``(lo, hi]`` holds ``dist`` (level 0 includes 0)."""
    edges = np.asarray(bounds[1:-1])
    return np.searchsorted(edges, dist, side="left")


def fcos_admissibility(positions, levels, gts, level_bounds=None):
    """A point may take an object it lies inside, on the level sized for it."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    levels = np.asarray(levels, dtype=np.int64).reshape(-1)
    if gts.m == 0:
        return AdmissibilityMask(np.zeros((len(positions), 0), dtype=bool))
    if level_bounds is None:
        level_bounds = default_level_bounds(int(levels.max()) + 1 if len(levels) else 5)
    lo = np.asarray(level_bounds[:-1])[levels][:, None]
    hi = np.asarray(level_bounds[1:])[levels][:, None]
    inside, dist = _level_distance(positions, gts)
    in_range = (dist <= hi) & ((dist > lo) | (lo == 0.0))
    return AdmissibilityMask(inside & in_range)


def rcnn_admissibility(proposal_boxes, gts):
    """A proposal may take an object it overlaps with IoU strictly above 0.5."""
    proposal_boxes = np.asarray(proposal_boxes, dtype=np.float64).reshape(-1, 4)
    if gts.m == 0:
        return AdmissibilityMask(np.zeros((len(proposal_boxes), 0), dtype=bool))
    return AdmissibilityMask(pairwise_iou(proposal_boxes, gts.boxes) > 0.5)


def restricted_match(preds, gts, mask, weights=CostWeights(), fallback=False):
    """Optimal matching with inadmissible (prediction, object) pairs forbidden.

    No-object slots admit every prediction. With ``fallback`` an object that
    cannot be placed admissibly is reopened to all predictions (and logged);
    otherwise :class:`InfeasibleMatchingError` names the starved objects.
    """
    c = cost_matrix(preds, gts, weights)
    allowed = np.asarray(mask.allowed if isinstance(mask, AdmissibilityMask) else mask, bool)
    if allowed.shape != (gts.n, gts.m):
        raise ContractViolation(f"mask shape {allowed.shape} != {(gts.n, gts.m)}")
    allowed = allowed.copy()
    starved = [int(g) for g in np.nonzero(~allowed.any(axis=0))[0]]
    if starved:
        if not fallback:
            raise InfeasibleMatchingError(f"objects without admissible prediction: {starved}", starved)
        log.debug("restricted matching fallback for objects %s", starved)
        allowed[:, starved] = True
    while True:
        restricted = c.copy()
        restricted[:gts.m][~allowed.T] = INF_COST
        try:
            return hungarian(restricted)
        except InfeasibleMatchingError as err:
            if not fallback:
                raise
            rows = [r for r in err.rows if r < gts.m]
            if not rows or allowed[:, rows].all():
                raise
            log.debug("restricted matching fallback for objects %s", rows)
            allowed[:, rows] = True
