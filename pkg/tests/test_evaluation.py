"""Detection extraction, AP / mAP and the detections file."""

import dataclasses
import json

import numpy as np
import pytest

from src.autodiff import Tensor
from src.config import EvalConfig
from src.constants import COCO_IOU_THRESHOLDS, NUM_CLASSES, RECALL_POINTS
from src.data import SceneAnnotation
from src.errors import AnnotationFormatError, EvaluationError
from src.evaluation import (
    Detection,
    compute_ap,
    compute_map,
    evaluate_split,
    extract_detections,
    interpolated_ap,
    load_detections,
    match_detections,
    save_detections,
)
from src.matching import Box
from src.model import Detector, ModelOutput
from tests.conftest import tiny_model

GT_BOX = Box(0.5, 0.5, 0.2, 0.2)

# disjoint cells: a detection on a cell overlaps only the GT of that cell
CELLS = (
    Box(0.25, 0.25, 0.3, 0.3),
    Box(0.75, 0.25, 0.3, 0.3),
    Box(0.25, 0.75, 0.3, 0.3),
    Box(0.75, 0.75, 0.3, 0.3),
)


def output_with(logits: np.ndarray, boxes: np.ndarray | None = None) -> ModelOutput:
    logits = np.asarray(logits, dtype=float)
    if boxes is None:
        boxes = np.tile([0.5, 0.5, 0.2, 0.2], (len(logits), 1))
    return ModelOutput(per_layer_logits=[Tensor(logits)], per_layer_boxes=[Tensor(boxes)])


def oracle_ap(scores: list[float], hits_in_input_order: list[bool], num_gt: int) -> float:
    """Precision at every rank, then the best precision reachable at each recall level."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    precisions, recalls = [], []
    tp = 0
    for rank, i in enumerate(order, start=1):
        tp += hits_in_input_order[i]
        precisions.append(tp / rank)
        recalls.append(tp / num_gt)
    total = 0.0
    for t in np.linspace(0.0, 1.0, RECALL_POINTS):
        reachable = [p for p, r in zip(precisions, recalls, strict=True) if r >= t]
        total += max(reachable, default=0.0)
    return total / RECALL_POINTS


class TestExtractDetections:
    def test_everything_below_threshold(self):
        assert extract_detections(output_with(np.full((4, 6), -10.0)), score_threshold=0.05) == []

    def test_keeps_the_highest_scores(self):
        logits = np.full((3, 6), -10.0)
        logits[0, 1], logits[1, 4], logits[2, 2] = 1.0, 3.0, 2.0
        dets = extract_detections(output_with(logits), image_id=7, score_threshold=0.05, max_det=2)
        assert [d.class_id for d in dets] == [4, 2]
        assert all(d.image_id == 7 for d in dets)
        assert dets[0].score == pytest.approx(1.0 / (1.0 + np.exp(-3.0)))

    def test_boxes_come_from_the_final_layer(self):
        boxes = np.array([[0.3, 0.4, 0.1, 0.2]])
        (det,) = extract_detections(output_with(np.full((1, 6), 2.0), boxes))
        assert det.box == pytest.approx(Box(0.3, 0.4, 0.1, 0.2))


class TestComputeAP:
    def test_single_good_detection(self):
        gts = [SceneAnnotation(0, [GT_BOX], [0])]
        dets = [Detection(0, 0, 0.8, Box(0.5, 0.5, 0.2, 0.18))]
        assert compute_ap(dets, gts, 0, 0.5) == pytest.approx(1.0)

    def test_single_poor_detection(self):
        gts = [SceneAnnotation(0, [GT_BOX], [0])]
        dets = [Detection(0, 0, 0.8, Box(0.5, 0.5, 0.2, 0.06))]
        assert compute_ap(dets, gts, 0, 0.5) == 0.0

    def test_hit_miss_hit(self):
        gts = [SceneAnnotation(0, [CELLS[0], CELLS[3]], [0, 0])]
        dets = [
            Detection(0, 0, 0.9, CELLS[0]),
            Detection(0, 0, 0.8, CELLS[1]),
            Detection(0, 0, 0.7, CELLS[3]),
        ]
        expected = (51 * 1.0 + 50 * (2.0 / 3.0)) / 101
        assert compute_ap(dets, gts, 0, 0.5) == pytest.approx(expected, abs=1e-12)

    def test_class_without_ground_truth_is_undefined(self):
        gts = [SceneAnnotation(0, [GT_BOX], [0])]
        assert compute_ap([Detection(0, 1, 0.9, GT_BOX)], gts, 1) is None

    def test_duplicate_detection_is_a_false_positive(self):
        gts = [SceneAnnotation(0, [GT_BOX], [0])]
        dets = [Detection(0, 0, 0.9, GT_BOX), Detection(0, 0, 0.8, GT_BOX)]
        hits, num_gt = match_detections(dets, gts, 0, 0.5)
        np.testing.assert_array_equal(hits, [True, False])
        assert num_gt == 1

    def test_other_classes_are_ignored(self):
        gts = [SceneAnnotation(0, [GT_BOX], [2])]
        dets = [Detection(0, 0, 0.99, GT_BOX), Detection(0, 2, 0.5, GT_BOX)]
        assert compute_ap(dets, gts, 2) == pytest.approx(1.0)

    def test_no_ground_truth_in_interpolation(self):
        with pytest.raises(EvaluationError):
            interpolated_ap(np.array([True]), 0)

    def test_random_cases_against_the_oracle(self):
        rng = np.random.default_rng(99)
        checked = 0
        while checked < 500:
            num_images = int(rng.integers(1, 4))
            occupied = [rng.random(len(CELLS)) < 0.5 for _ in range(num_images)]
            num_gt = int(sum(o.sum() for o in occupied))
            gts = [
                SceneAnnotation(i, [CELLS[c] for c in np.flatnonzero(o)], [0] * int(o.sum()))
                for i, o in enumerate(occupied)
            ]
            targets = [(int(rng.integers(num_images)), int(rng.integers(len(CELLS))))
                       for _ in range(int(rng.integers(0, 7)))]
            # one decimal place makes equal scores common
            scores = [round(float(rng.random()), 1) for _ in targets]
            dets = [Detection(i, 0, s, CELLS[c]) for (i, c), s in zip(targets, scores, strict=True)]
            if num_gt == 0:
                assert compute_ap(dets, gts, 0) is None
                continue

            claimed: set[tuple[int, int]] = set()
            hits = [False] * len(dets)
            for k in sorted(range(len(dets)), key=lambda k: -scores[k]):
                image_id, cell = targets[k]
                if occupied[image_id][cell] and (image_id, cell) not in claimed:
                    claimed.add((image_id, cell))
                    hits[k] = True
            assert compute_ap(dets, gts, 0) == pytest.approx(oracle_ap(scores, hits, num_gt), abs=1e-9)
            checked += 1


class TestComputeMap:
    @pytest.fixture
    def scenes(self):
        return [
            SceneAnnotation(0, [CELLS[0], CELLS[2]], [0, 2]),
            SceneAnnotation(1, [CELLS[1]], [5]),
        ]

    def test_perfect_detections(self, scenes):
        dets = [
            Detection(s.image_id, label, 0.9, box)
            for s in scenes
            for box, label in zip(s.boxes, s.labels, strict=True)
        ]
        result = compute_map(dets, scenes)
        assert result.map50 == pytest.approx(1.0)
        assert result.map5095 == pytest.approx(1.0)
        assert (result.precision, result.recall) == (1.0, 1.0)
        assert result.per_class_ap50[1] is None
        assert set(result.per_class_ap50) == set(range(NUM_CLASSES))

    def test_no_detections(self, scenes):
        result = compute_map([], scenes)
        assert result.map50 == 0.0
        assert result.recall == 0.0
        assert result.precision == 0.0

    def test_single_class_mean(self):
        scenes = [SceneAnnotation(0, [CELLS[0], CELLS[3]], [4, 4])]
        dets = [Detection(0, 4, 0.9, CELLS[0]), Detection(0, 4, 0.8, CELLS[1])]
        result = compute_map(dets, scenes)
        assert result.map50 == result.per_class_ap50[4]
        assert result.map50 == pytest.approx(compute_ap(dets, scenes, 4, 0.5))

    def test_operating_point(self, scenes):
        dets = [
            Detection(0, 0, 0.9, CELLS[0]),
            Detection(0, 0, 0.7, CELLS[3]),
            Detection(1, 5, 0.3, CELLS[1]),
        ]
        result = compute_map(dets, scenes, operating_score=0.5)
        assert result.precision == pytest.approx(0.5)
        assert result.recall == pytest.approx(1.0 / 3.0)

    def test_unknown_image(self, scenes):
        with pytest.raises(EvaluationError, match="unknown image"):
            compute_map([Detection(9, 0, 0.9, GT_BOX)], scenes)

    def test_no_ground_truth(self):
        with pytest.raises(EvaluationError, match="no ground truth"):
            compute_map([], [SceneAnnotation(0)])

    def test_report_names_every_class(self, scenes):
        report = compute_map([], scenes).to_dict()
        assert [c["class_id"] for c in report["per_class"]] == list(range(NUM_CLASSES))
        assert report["per_class"][1]["name"] == "Bike Battery"
        assert report["per_class"][0]["instances"] == 1


def jittered_case(rng: np.random.Generator, num_classes: int = 3) -> tuple[list[SceneAnnotation], list[Detection]]:
    """
    Random scenes on the disjoint cells with detections near the cells, so a
    detection can only ever match the GT of its own cell and class.
    """
    num_images = int(rng.integers(1, 4))
    gts = []
    for image_id in range(num_images):
        cells = np.flatnonzero(rng.random(len(CELLS)) < 0.6)
        labels = rng.integers(0, num_classes, size=len(cells)).tolist()
        gts.append(SceneAnnotation(image_id, [CELLS[c] for c in cells], labels))
    dets = []
    for _ in range(int(rng.integers(1, 10))):
        cell = CELLS[int(rng.integers(len(CELLS)))]
        dx, dy = rng.uniform(-0.04, 0.04, size=2)
        sx, sy = rng.uniform(0.8, 1.2, size=2)
        box = Box(cell.cx + dx, cell.cy + dy, cell.w * sx, cell.h * sy)
        # one decimal place makes equal scores common
        score = round(float(rng.uniform(0.1, 1.0)), 1)
        dets.append(Detection(int(rng.integers(num_images)), int(rng.integers(num_classes)), score, box))
    return gts, dets


def true_positive_indices(dets: list[Detection], gts: list[SceneAnnotation], class_id: int, iou: float) -> list[int]:
    """Positions in `dets` of the class's detections that match at `iou`."""
    mine = [k for k, d in enumerate(dets) if d.class_id == class_id]
    ranked = sorted(mine, key=lambda k: -dets[k].score)
    hits, _ = match_detections(dets, gts, class_id, iou)
    return [k for k, hit in zip(ranked, hits, strict=True) if hit]


class TestAPProperties:
    CASES = 300

    def test_trailing_false_positive_never_raises_ap(self):
        rng = np.random.default_rng(21)
        for _ in range(self.CASES):
            gts, dets = jittered_case(rng)
            gts.append(SceneAnnotation(len(gts)))
            lowest = min(d.score for d in dets)
            stray = Detection(len(gts) - 1, int(rng.integers(3)), lowest / 2, CELLS[0])
            for class_id in range(3):
                for iou in COCO_IOU_THRESHOLDS:
                    before = compute_ap(dets, gts, class_id, iou)
                    after = compute_ap([*dets, stray], gts, class_id, iou)
                    if before is None:
                        assert after is None
                    else:
                        assert after <= before + 1e-12

    def test_raising_a_true_positive_never_lowers_ap(self):
        rng = np.random.default_rng(22)
        checked = 0
        while checked < self.CASES:
            gts, dets = jittered_case(rng)
            class_id = int(rng.integers(3))
            iou = float(rng.choice(COCO_IOU_THRESHOLDS))
            positives = true_positive_indices(dets, gts, class_id, iou)
            if not positives:
                continue
            k = int(rng.choice(positives))
            raised = list(dets)
            raised[k] = dataclasses.replace(dets[k], score=float(rng.uniform(dets[k].score, 1.0)))
            assert compute_ap(raised, gts, class_id, iou) >= compute_ap(dets, gts, class_id, iou) - 1e-12
            checked += 1

    def test_raising_a_true_positive_never_lowers_map50(self):
        rng = np.random.default_rng(23)
        checked = 0
        while checked < self.CASES:
            gts, dets = jittered_case(rng)
            if not any(s.labels for s in gts):
                continue
            positives = [k for c in range(3) for k in true_positive_indices(dets, gts, c, 0.5)]
            if not positives:
                continue
            k = int(rng.choice(positives))
            raised = list(dets)
            raised[k] = dataclasses.replace(dets[k], score=1.0)
            assert compute_map(raised, gts).map50 >= compute_map(dets, gts).map50 - 1e-12
            checked += 1

    def test_stricter_thresholds_never_score_higher(self):
        rng = np.random.default_rng(24)
        checked = 0
        while checked < self.CASES:
            gts, dets = jittered_case(rng)
            if not any(s.labels for s in gts):
                continue
            result = compute_map(dets, gts)
            assert result.map5095 <= result.map50 + 1e-12
            for class_id, ap50 in result.per_class_ap50.items():
                if ap50 is not None:
                    assert result.per_class_ap5095[class_id] <= ap50 + 1e-12
            checked += 1


class TestEvaluateSplit:
    def test_metrics_are_bounded(self, tiny_dataset):
        detector = Detector(tiny_model())
        result = evaluate_split(detector, tiny_dataset["val"], EvalConfig(score_threshold=0.0))
        for value in (result.map50, result.map5095, result.precision, result.recall):
            assert 0.0 <= value <= 1.0


class TestDetectionsFile:
    def test_round_trip(self, tmp_path):
        dets = [Detection(0, 3, 0.75, Box(0.5, 0.4, 0.2, 0.1)), Detection(2, 1, 0.1, GT_BOX)]
        save_detections(tmp_path / "dets.json", dets)
        assert load_detections(tmp_path / "dets.json") == dets

    def test_score_out_of_range(self, tmp_path):
        path = tmp_path / "dets.json"
        path.write_text(json.dumps([{"image_id": 0, "class_id": 0, "score": 1.5, "bbox": [0.5, 0.5, 0.1, 0.1]}]))
        with pytest.raises(AnnotationFormatError, match=r"\[0\]\.score"):
            load_detections(path)

    def test_degenerate_box(self, tmp_path):
        path = tmp_path / "dets.json"
        path.write_text(json.dumps([{"image_id": 0, "class_id": 0, "score": 0.5, "bbox": [0.5, 0.5, 0.0, 0.1]}]))
        with pytest.raises(AnnotationFormatError, match=r"\[0\]\.bbox"):
            load_detections(path)
