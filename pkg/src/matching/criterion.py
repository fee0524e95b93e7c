"""
Set-prediction training objective.

    L = L_cls + lambda_l1 * L_L1 + lambda_giou * L_GIoU

computed for every decoder layer with its own Hungarian matching and summed
over layers. The assignment is a constant during backward.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from src.autodiff import Tensor
from src.autodiff import functional as F
from src.matching.boxes import Box, paired_giou, pairwise_giou
from src.matching.hungarian import MatchAssignment, hungarian
from src.model import ModelOutput


@dataclass
class GroundTruthSet:
    """One image's boxes (G x 4, cx/cy/w/h) and class ids (G,)."""

    boxes: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=np.intp).reshape(-1)
        if len(self.boxes) != len(self.labels):
            raise ValueError(f"{len(self.boxes)} boxes but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_boxes(cls, boxes: list[Box], labels: list[int]) -> "GroundTruthSet":
        return cls(np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(labels))

    def permuted(self, order: np.ndarray) -> "GroundTruthSet":
        return GroundTruthSet(self.boxes[order], self.labels[order])


class CostWeights(NamedTuple):
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def build_cost_matrix(
    logits: np.ndarray | Tensor,
    boxes: np.ndarray | Tensor,
    gt: GroundTruthSet,
    weights: CostWeights = CostWeights(),
) -> np.ndarray:
    """
    K x G matching cost:
    w_cls * (-p[label]) + w_l1 * |box - gt|_1 + w_giou * (-giou(box, gt)).
    """
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    boxes = boxes.data if isinstance(boxes, Tensor) else np.asarray(boxes, dtype=np.float64)
    if len(gt) == 0:
        raise ValueError("cost matrix needs at least one ground truth; skip matching instead")
    prob = _sigmoid(logits)[:, gt.labels]
    l1 = np.abs(boxes[:, None, :] - gt.boxes[None, :, :]).sum(axis=-1)
    return weights.cls * -prob + weights.l1 * l1 + weights.giou * -pairwise_giou(boxes, gt.boxes)


def match(
    logits: np.ndarray | Tensor,
    boxes: np.ndarray | Tensor,
    gt: GroundTruthSet,
    weights: CostWeights = CostWeights(),
) -> MatchAssignment:
    if len(gt) == 0:
        return MatchAssignment()
    return hungarian(build_cost_matrix(logits, boxes, gt, weights))


def classification_loss(
    logits: Tensor,
    assignment: MatchAssignment,
    gt: GroundTruthSet,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> Tensor:
    """Sigmoid focal loss over every (query, class), normalized by max(1, G)."""
    targets = np.zeros(logits.shape)
    if len(assignment):
        targets[assignment.query_indices, gt.labels[assignment.gt_indices]] = 1.0
    prob = F.sigmoid(logits)
    # -log(p) = softplus(-x), -log(1 - p) = softplus(x)
    positive = (alpha * targets) * ((1.0 - prob) ** gamma) * F.softplus(-logits)
    negative = ((1.0 - alpha) * (1.0 - targets)) * (prob**gamma) * F.softplus(logits)
    return (positive + negative).sum() * (1.0 / max(1, len(gt)))


def box_losses(boxes: Tensor, assignment: MatchAssignment, gt: GroundTruthSet) -> tuple[Tensor, Tensor]:
    """Mean L1 distance and mean (1 - GIoU) over matched pairs; both 0 without pairs."""
    if len(assignment) == 0:
        return Tensor(0.0), Tensor(0.0)
    matched = F.gather_rows(boxes, assignment.query_indices)
    targets = gt.boxes[assignment.gt_indices]
    count = 1.0 / len(assignment)
    l1 = F.abs(matched - targets).sum() * count
    giou_loss = (1.0 - paired_giou(matched, targets)).sum() * count
    return l1, giou_loss


class LayerLoss(NamedTuple):
    cls: float
    l1: float
    giou: float


@dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    l1: float
    giou: float
    per_layer: list[LayerLoss] = field(default_factory=list)
    assignments: list[MatchAssignment] = field(default_factory=list)

    @property
    def value(self) -> float:
        return self.total.item()


class Criterion:
    """
    Hungarian-matched detection loss.

    Args:
        lambda_l1: weight of the L1 box term.
        lambda_giou: weight of the GIoU box term.
        cost_weights: class / L1 / GIoU weights of the matching cost.
        alpha: focal loss alpha.
        gamma: focal loss gamma.
    """

    def __init__(
        self,
        lambda_l1: float = 5.0,
        lambda_giou: float = 2.0,
        cost_weights: CostWeights = CostWeights(),
        alpha: float = 0.25,
        gamma: float = 2.0,
    ):
        self.lambda_l1 = lambda_l1
        self.lambda_giou = lambda_giou
        self.cost_weights = cost_weights
        self.alpha = alpha
        self.gamma = gamma

    def layer_loss(
        self, logits: Tensor, boxes: Tensor, gt: GroundTruthSet
    ) -> tuple[Tensor, LayerLoss, MatchAssignment]:
        assignment = match(logits, boxes, gt, self.cost_weights)
        cls = classification_loss(logits, assignment, gt, self.alpha, self.gamma)
        l1, giou_loss = box_losses(boxes, assignment, gt)
        total = cls + self.lambda_l1 * l1 + self.lambda_giou * giou_loss
        return total, LayerLoss(cls.item(), l1.item(), giou_loss.item()), assignment

    def __call__(self, output: ModelOutput, gt: GroundTruthSet) -> LossBreakdown:
        return total_loss(
            output,
            gt,
            self.lambda_l1,
            self.lambda_giou,
            cost_weights=self.cost_weights,
            alpha=self.alpha,
            gamma=self.gamma,
        )

    def encoder_loss(self, output: ModelOutput, gt: GroundTruthSet) -> Tensor:
        """
        Classification loss on the selected tokens' scores, matched against
        the ground truth with the tokens' anchors as boxes. Trains the top-K
        score head, which the decoder loss never reaches.
        """
        if output.selected_scores is None or output.queries is None:
            raise ValueError("encoder loss needs the selected token scores of a full forward pass")
        anchors = output.queries.references
        assignment = match(output.selected_scores, anchors, gt, self.cost_weights)
        return classification_loss(output.selected_scores, assignment, gt, self.alpha, self.gamma)


def total_loss(
    output: ModelOutput,
    gt: GroundTruthSet,
    lambda_l1: float = 5.0,
    lambda_giou: float = 2.0,
    cost_weights: CostWeights = CostWeights(),
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> LossBreakdown:
    """Sum over decoder layers of the per-layer matched loss (auxiliary losses included)."""
    if output.num_layers == 0:
        raise ValueError("model output has no decoder layers")
    criterion = Criterion(lambda_l1, lambda_giou, cost_weights, alpha, gamma)
    layer_totals: list[Tensor] = []
    per_layer: list[LayerLoss] = []
    assignments: list[MatchAssignment] = []
    for logits, boxes in zip(output.per_layer_logits, output.per_layer_boxes, strict=True):
        layer_total, parts, assignment = criterion.layer_loss(logits, boxes, gt)
        layer_totals.append(layer_total)
        per_layer.append(parts)
        assignments.append(assignment)

    total = layer_totals[0]
    for layer_total in layer_totals[1:]:
        total = total + layer_total
    return LossBreakdown(
        total=total,
        cls=sum(p.cls for p in per_layer),
        l1=sum(p.l1 for p in per_layer),
        giou=sum(p.giou for p in per_layer),
        per_layer=per_layer,
        assignments=assignments,
    )
