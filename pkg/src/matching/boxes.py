"""Normalized cx/cy/w/h boxes and their overlap measures."""

from typing import NamedTuple

import numpy as np

from src.autodiff import Tensor
from src.autodiff import functional as F


class Box(NamedTuple):
    """A box in normalized center form."""

    cx: float
    cy: float
    w: float
    h: float

    def validate(self) -> None:
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center ({self.cx}, {self.cy}) outside [0, 1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size ({self.w}, {self.h}) outside (0, 1]")

    def validate_inside(self, tol: float = 1e-9) -> None:
        """Like validate, and the whole box must also lie within the image."""
        self.validate()
        x0, y0, x1, y1 = self.corners()
        if min(x0, y0) < -tol or max(x1, y1) > 1.0 + tol:
            raise ValueError(f"box ({x0:.4g}, {y0:.4g}, {x1:.4g}, {y1:.4g}) extends outside the image")

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    @property
    def area(self) -> float:
        return self.w * self.h


def to_corners(boxes: np.ndarray) -> np.ndarray:
    """(N, 4) cx/cy/w/h -> (N, 4) x0/y0/x1/y1."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = boxes[:, 2:] / 2
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def iou(a: Box, b: Box) -> float:
    return float(pairwise_iou(np.array([a]), np.array([b]))[0, 0])


def giou(a: Box, b: Box) -> float:
    return float(pairwise_giou(np.array([a]), np.array([b]))[0, 0])


def _overlap(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    ca, cb = to_corners(a)[:, None, :], to_corners(b)[None, :, :]
    lo = np.maximum(ca[..., :2], cb[..., :2])
    hi = np.minimum(ca[..., 2:], cb[..., 2:])
    inter = np.clip(hi - lo, 0.0, None).prod(axis=-1)
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    union = area_a + area_b - inter
    enclose = (np.maximum(ca[..., 2:], cb[..., 2:]) - np.minimum(ca[..., :2], cb[..., :2])).prod(axis=-1)
    return inter, union, enclose, area_a


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, 4) x (G, 4) -> (N, G) IoU matrix."""
    inter, union, _, _ = _overlap(a, b)
    return inter / union


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, 4) x (G, 4) -> (N, G) generalized IoU matrix."""
    inter, union, enclose, _ = _overlap(a, b)
    return inter / union - (enclose - union) / enclose


def paired_giou(pred: Tensor, target: np.ndarray) -> Tensor:
    """
    Differentiable GIoU between row i of `pred` (n, 4) and row i of `target`.

    Gradients flow into `pred` only.
    """
    target = to_corners(target)
    cx, cy, w, h = pred[:, 0], pred[:, 1], pred[:, 2], pred[:, 3]
    px0, px1 = cx - w * 0.5, cx + w * 0.5
    py0, py1 = cy - h * 0.5, cy + h * 0.5
    tx0, ty0, tx1, ty1 = target[:, 0], target[:, 1], target[:, 2], target[:, 3]

    inter_w = F.relu(F.minimum(px1, tx1) - F.maximum(px0, tx0))
    inter_h = F.relu(F.minimum(py1, ty1) - F.maximum(py0, ty0))
    inter = inter_w * inter_h
    union = w * h + (tx1 - tx0) * (ty1 - ty0) - inter
    enclose = (F.maximum(px1, tx1) - F.minimum(px0, tx0)) * (F.maximum(py1, ty1) - F.minimum(py0, ty0))
    return inter / union - (enclose - union) / enclose
