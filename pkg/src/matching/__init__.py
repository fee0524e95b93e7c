from .boxes import Box, giou, iou, paired_giou, pairwise_giou, pairwise_iou, to_corners
from .criterion import (
    CostWeights,
    Criterion,
    GroundTruthSet,
    LayerLoss,
    LossBreakdown,
    box_losses,
    build_cost_matrix,
    classification_loss,
    match,
    total_loss,
)
from .hungarian import MatchAssignment, hungarian

__all__ = [
    "Box",
    "CostWeights",
    "Criterion",
    "GroundTruthSet",
    "LayerLoss",
    "LossBreakdown",
    "MatchAssignment",
    "box_losses",
    "build_cost_matrix",
    "classification_loss",
    "giou",
    "hungarian",
    "iou",
    "match",
    "paired_giou",
    "pairwise_giou",
    "pairwise_iou",
    "to_corners",
    "total_loss",
]
