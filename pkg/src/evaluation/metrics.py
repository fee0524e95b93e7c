"""
COCO-style detection metrics.

AP is the 101-point interpolated area under the precision-recall curve after
greedy matching (highest score first, best-IoU free ground truth first,
lower GT index on IoU ties). Classes without ground truth are undefined and
left out of the means.
"""

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pydantic
from pydantic import BaseModel, ConfigDict, Field

from src.config import EvalConfig
from src.constants import COCO_IOU_THRESHOLDS, NUM_CLASSES, RECALL_POINTS, battery_classes
from src.data import DetectionSplit, SceneAnnotation
from src.errors import AnnotationFormatError, EvaluationError
from src.matching import Box, pairwise_iou
from src.model import Detector, ModelOutput

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    image_id: int
    class_id: int
    score: float
    box: Box


@dataclass
class APResult:
    per_class_ap50: dict[int, float | None]
    per_class_ap5095: dict[int, float | None]
    map50: float
    map5095: float
    precision: float
    recall: float
    gt_counts: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        names = {c.class_id: c.name for c in battery_classes}
        return {
            "map50": self.map50,
            "map5095": self.map5095,
            "precision": self.precision,
            "recall": self.recall,
            "per_class": [
                {
                    "class_id": class_id,
                    "name": names.get(class_id, str(class_id)),
                    "instances": self.gt_counts.get(class_id, 0),
                    "ap50": self.per_class_ap50[class_id],
                    "ap5095": self.per_class_ap5095[class_id],
                }
                for class_id in sorted(self.per_class_ap50)
            ],
        }


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def extract_detections(
    output: ModelOutput,
    image_id: int = 0,
    score_threshold: float = 0.05,
    max_det: int = 100,
) -> list[Detection]:
    """
    One candidate per query from the final layer: its best class and score.
    No NMS; the one-to-one training makes duplicates rare.
    """
    probs = _sigmoid(output.final_logits.data)
    boxes = output.final_boxes.data
    classes = probs.argmax(axis=1)
    scores = probs[np.arange(len(probs)), classes]
    keep = np.flatnonzero(scores >= score_threshold)
    keep = keep[np.argsort(-scores[keep], kind="mergesort")][:max_det]
    return [
        Detection(image_id, int(classes[q]), float(scores[q]), Box(*map(float, boxes[q])))
        for q in keep
    ]


def _sort_by_score(dets: Sequence[Detection]) -> list[Detection]:
    return sorted(dets, key=lambda d: -d.score)  # stable


def _class_gt(gts: Sequence[SceneAnnotation], class_id: int) -> dict[int, np.ndarray]:
    return {
        scene.image_id: np.array(
            [box for box, label in zip(scene.boxes, scene.labels, strict=True) if label == class_id],
            dtype=np.float64,
        ).reshape(-1, 4)
        for scene in gts
    }


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[SceneAnnotation],
    class_id: int,
    iou_threshold: float,
) -> tuple[np.ndarray, int]:
    """
    Greedy matching for one class.

    Returns:
        hit flags of the class's detections in descending score order, and
        the number of ground-truth instances of the class.
    """
    gt_boxes = _class_gt(gts, class_id)
    used = {image_id: np.zeros(len(boxes), dtype=bool) for image_id, boxes in gt_boxes.items()}
    ordered = _sort_by_score([d for d in dets if d.class_id == class_id])
    hits = np.zeros(len(ordered), dtype=bool)
    for i, det in enumerate(ordered):
        candidates = gt_boxes.get(det.image_id)
        if candidates is None or len(candidates) == 0:
            continue
        ious = pairwise_iou(np.array([det.box]), candidates)[0]
        ious[used[det.image_id]] = -1.0
        best = int(np.argmax(ious))  # first maximum: lower GT index wins ties
        if ious[best] >= iou_threshold:
            hits[i] = True
            used[det.image_id][best] = True
    return hits, sum(len(b) for b in gt_boxes.values())


def interpolated_ap(hits: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP of a ranked hit/miss sequence."""
    if num_gt == 0:
        raise EvaluationError("AP is undefined without ground truth")
    if len(hits) == 0:
        return 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    thresholds = np.linspace(0.0, 1.0, RECALL_POINTS)
    idx = np.searchsorted(recall, thresholds, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def compute_ap(
    dets: Sequence[Detection],
    gts: Sequence[SceneAnnotation],
    class_id: int,
    iou_threshold: float = 0.5,
) -> float | None:
    """AP of one class at one IoU threshold; None when the class has no ground truth."""
    hits, num_gt = match_detections(dets, gts, class_id, iou_threshold)
    if num_gt == 0:
        return None
    return interpolated_ap(hits, num_gt)


def _mean_defined(values: Mapping[int, float | None]) -> float:
    defined = [v for v in values.values() if v is not None]
    return float(np.mean(defined)) if defined else 0.0


def compute_map(
    dets: Sequence[Detection],
    gts: Sequence[SceneAnnotation],
    num_classes: int = NUM_CLASSES,
    operating_score: float = 0.5,
) -> APResult:
    """Per-class AP50 / AP50:95, their means over defined classes and P/R at `operating_score`."""
    image_ids = {scene.image_id for scene in gts}
    stray = {d.image_id for d in dets} - image_ids
    if stray:
        raise EvaluationError(f"detections reference unknown image ids, e.g. {min(stray)}")
    gt_counts = {
        c: sum(int(np.sum(np.asarray(s.labels) == c)) for s in gts) for c in range(num_classes)
    }
    total_gt = sum(gt_counts.values())
    if total_gt == 0:
        raise EvaluationError("no ground truth instances to evaluate against")

    ap50: dict[int, float | None] = {}
    ap5095: dict[int, float | None] = {}
    for class_id in range(num_classes):
        if gt_counts[class_id] == 0:
            ap50[class_id] = ap5095[class_id] = None
            continue
        per_threshold = [compute_ap(dets, gts, class_id, t) for t in COCO_IOU_THRESHOLDS]
        ap50[class_id] = per_threshold[0]
        ap5095[class_id] = float(np.mean(per_threshold))

    confident = [d for d in dets if d.score >= operating_score]
    true_positives = sum(
        int(match_detections(confident, gts, c, 0.5)[0].sum()) for c in range(num_classes)
    )
    return APResult(
        per_class_ap50=ap50,
        per_class_ap5095=ap5095,
        map50=_mean_defined(ap50),
        map5095=_mean_defined(ap5095),
        precision=true_positives / len(confident) if confident else 0.0,
        recall=true_positives / total_gt,
        gt_counts=gt_counts,
    )


def predict_split(detector: Detector, split: DetectionSplit, cfg: EvalConfig) -> list[Detection]:
    detections: list[Detection] = []
    for image, scene in zip(split.images, split.annotations, strict=True):
        output = detector.forward(image)
        detections.extend(
            extract_detections(output, scene.image_id, cfg.score_threshold, cfg.max_detections)
        )
    return detections


def evaluate_split(detector: Detector, split: DetectionSplit, cfg: EvalConfig) -> APResult:
    detections = predict_split(detector, split, cfg)
    return compute_map(detections, split.annotations, detector.config.num_classes, cfg.operating_score)


# -- detections file --


class DetectionRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_id: int
    class_id: int
    score: float = Field(ge=0.0, le=1.0)
    bbox: tuple[float, float, float, float]


_DetectionList = pydantic.TypeAdapter(list[DetectionRecord])


def save_detections(path: str | Path, dets: Sequence[Detection]) -> None:
    records = [
        {"image_id": d.image_id, "class_id": d.class_id, "score": d.score, "bbox": list(d.box)}
        for d in dets
    ]
    Path(path).write_text(json.dumps(records, indent=1))


def load_detections(path: str | Path) -> list[Detection]:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise AnnotationFormatError(f"cannot read detections {path}: {err.strerror or err}") from err
    try:
        records = _DetectionList.validate_json(text)
    except pydantic.ValidationError as err:
        first = err.errors()[0]
        loc = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in first["loc"])
        raise AnnotationFormatError(f"{path}: {loc}: {first['msg']}") from err
    dets = []
    for i, r in enumerate(records):
        box = Box(*r.bbox)
        try:
            box.validate()
        except ValueError as err:
            raise AnnotationFormatError(f"{path}: [{i}].bbox: {err}") from err
        dets.append(Detection(r.image_id, r.class_id, r.score, box))
    return dets
