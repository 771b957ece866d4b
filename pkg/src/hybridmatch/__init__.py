"""Hybrid one-to-one / one-to-many set matching for query-based detectors."""
from .assignment import Assignment, brute_force, hungarian
from .geometry import Box, CornerBox, from_corners, giou, iou, pairwise_geometry, to_corners
from .matching import (
    GroundTruthSet,
    HybridConfig,
    LayerPredictions,
    MatchWeights,
    RepeatedTargets,
    build_cost_matrix,
    match_one2many,
    match_one2one,
    positive_supervision_count,
    repeat_targets,
)

__version__ = "0.1.0"
