"""Optimal and restricted bipartite matching.

The Hungarian kernel is compiled with Cython when available; set
``SETDET_PURE_PYTHON=1`` to force the numpy fallback. ``BACKEND`` reports
which one was loaded.
"""

from .core import (
    BACKEND,
    FCOS_LEVEL_BOUNDS,
    INF_COST,
    AdmissibilityMask,
    CostWeights,
    Matching,
    PaddedGroundTruth,
    cost_matrix,
    default_level_bounds,
    fcos_admissibility,
    hungarian,
    level_of_distance,
    match_cost,
    object_costs,
    optimal_match,
    rcnn_admissibility,
    restricted_match,
)

__all__ = [
    "BACKEND",
    "FCOS_LEVEL_BOUNDS",
    "INF_COST",
    "AdmissibilityMask",
    "CostWeights",
    "Matching",
    "PaddedGroundTruth",
    "cost_matrix",
    "default_level_bounds",
    "fcos_admissibility",
    "hungarian",
    "level_of_distance",
    "match_cost",
    "object_costs",
    "optimal_match",
    "rcnn_admissibility",
    "restricted_match",
]
