"""Box overlaps, Hungarian matching and the set-prediction loss."""

import functools
import itertools
import math

import numpy as np
import pytest

from src.autodiff import Tensor, backward, finite_difference_check, parameter
from src.autodiff import functional as F
from src.errors import MatchingError
from src.matching import (
    Box,
    CostWeights,
    Criterion,
    GroundTruthSet,
    MatchAssignment,
    box_losses,
    build_cost_matrix,
    classification_loss,
    giou,
    hungarian,
    iou,
    match,
    paired_giou,
    pairwise_giou,
    pairwise_iou,
    total_loss,
)
from src.model import Detector, ModelOutput
from tests.conftest import tiny_model

# 28 shapes up to 7 x 7, so 5040 instances in all
EXHAUSTIVE_PER_SHAPE = 180


def random_boxes(rng: np.random.Generator, n: int) -> np.ndarray:
    centers = rng.uniform(0.2, 0.8, size=(n, 2))
    sizes = rng.uniform(0.05, 0.4, size=(n, 2))
    return np.hstack([centers, sizes])


@functools.cache
def injective_maps(num_queries: int, num_gts: int) -> np.ndarray:
    """Every GT -> query map as rows, in lexicographic order."""
    return np.array(list(itertools.permutations(range(num_queries), num_gts)), dtype=int)


def brute_force(cost: np.ndarray) -> tuple[float, tuple[int, ...]]:
    """Minimum over every injective GT -> query map; the lexicographically first on ties."""
    maps = injective_maps(*cost.shape)
    totals = cost[maps, np.arange(cost.shape[1])].sum(axis=1)
    first = int(np.argmax(totals <= totals.min() + 1e-9))
    return float(totals[first]), tuple(maps[first].tolist())


def empty_gt() -> GroundTruthSet:
    return GroundTruthSet(np.zeros((0, 4)), np.zeros(0, dtype=int))


class TestOverlap:
    def test_identical_boxes(self):
        box = Box(0.4, 0.5, 0.2, 0.3)
        assert iou(box, box) == pytest.approx(1.0)
        assert giou(box, box) == pytest.approx(1.0)

    def test_disjoint_boxes_have_zero_iou(self):
        assert iou(Box(0.2, 0.2, 0.1, 0.1), Box(0.8, 0.8, 0.1, 0.1)) == 0.0

    def test_half_shifted_boxes(self):
        assert iou(Box(0.25, 0.25, 0.5, 0.5), Box(0.5, 0.25, 0.5, 0.5)) == pytest.approx(1.0 / 3.0)

    def test_separated_unit_squares(self):
        assert giou(Box(0.5, 0.5, 1.0, 1.0), Box(2.5, 0.5, 1.0, 1.0)) == pytest.approx(-1.0 / 3.0)

    def test_giou_range_and_bound(self, rng):
        a, b = random_boxes(rng, 40), random_boxes(rng, 30)
        g, u = pairwise_giou(a, b), pairwise_iou(a, b)
        assert np.all((g > -1.0) & (g <= 1.0))
        assert np.all(g <= u + 1e-12)

    def test_paired_giou_agrees_with_the_matrix(self, rng):
        a, b = random_boxes(rng, 12), random_boxes(rng, 12)
        np.testing.assert_allclose(paired_giou(Tensor(a), b).data, np.diag(pairwise_giou(a, b)), atol=1e-12)

    def test_paired_giou_gradient(self, rng):
        target = random_boxes(rng, 5)
        error = finite_difference_check(lambda x: paired_giou(x, target).sum(), random_boxes(rng, 5))
        assert error <= 1e-5

    def test_box_validation(self):
        with pytest.raises(ValueError, match="size"):
            Box(0.5, 0.5, 0.0, 0.2).validate()
        with pytest.raises(ValueError, match="center"):
            Box(1.2, 0.5, 0.1, 0.2).validate()


class TestCostMatrix:
    def test_perfect_prediction(self):
        gt = GroundTruthSet([[0.5, 0.5, 0.2, 0.2]], [3])
        logits = np.full((1, 6), -50.0)
        logits[0, 3] = 50.0
        cost = build_cost_matrix(logits, gt.boxes, gt, CostWeights(2.0, 5.0, 2.0))
        np.testing.assert_allclose(cost, [[-4.0]])

    def test_uniform_logits_give_a_sixth(self, rng):
        gt = GroundTruthSet(random_boxes(rng, 3), [0, 4, 5])
        logits = np.full((5, 6), math.log(1.0 / 5.0))
        cost = build_cost_matrix(logits, random_boxes(rng, 5), gt, CostWeights(1.0, 0.0, 0.0))
        np.testing.assert_allclose(cost, np.full((5, 3), -1.0 / 6.0), atol=1e-15)

    def test_shape(self, rng):
        gt = GroundTruthSet(random_boxes(rng, 2), [1, 2])
        assert build_cost_matrix(rng.normal(size=(7, 6)), random_boxes(rng, 7), gt).shape == (7, 2)

    def test_empty_ground_truth_skips_matching(self, rng):
        assert len(match(rng.normal(size=(4, 6)), random_boxes(rng, 4), empty_gt())) == 0


class TestHungarian:
    def test_diagonal_optimum(self):
        cost = np.array([[1.0, 2.0], [2.0, 1.0]])
        assignment = hungarian(cost)
        assert assignment.pairs == ((0, 0), (1, 1))
        assert assignment.total_cost(cost) == 2.0

    def test_anti_diagonal_optimum(self):
        cost = np.array([[10.0, 1.0], [1.0, 10.0]])
        assignment = hungarian(cost)
        assert assignment.pairs == ((1, 0), (0, 1))
        assert sorted(assignment.pairs) == [(0, 1), (1, 0)]
        assert assignment.total_cost(cost) == 2.0

    def test_more_gts_than_queries(self):
        with pytest.raises(MatchingError, match="one-to-one"):
            hungarian(np.zeros((2, 3)))

    def test_non_finite_cost(self):
        with pytest.raises(MatchingError, match="non-finite"):
            hungarian(np.array([[np.nan, 1.0], [1.0, 0.0]]))

    def test_no_ground_truth(self):
        assert hungarian(np.zeros((4, 0))) == MatchAssignment()

    def test_ties_resolve_to_the_smallest_query_sequence(self):
        assert hungarian(np.zeros((4, 2))).pairs == ((0, 0), (1, 1))

    @pytest.mark.parametrize("num_queries", range(1, 8))
    def test_exhaustive_suite_up_to_seven(self, num_queries):
        rng = np.random.default_rng(7 + num_queries)
        for num_gts in range(1, num_queries + 1):
            for _ in range(EXHAUSTIVE_PER_SHAPE):
                # small integers force many exactly tied optima
                cost = rng.integers(0, 4, size=(num_queries, num_gts)).astype(float)
                best_cost, best = brute_force(cost)
                assignment = hungarian(cost)
                assert assignment.total_cost(cost) == best_cost
                assert tuple(assignment.query_indices.tolist()) == best

    def test_random_rectangular_instances(self):
        rng = np.random.default_rng(11)
        for _ in range(200):
            num_gts = int(rng.integers(1, 6))
            num_queries = int(rng.integers(num_gts, 7))
            cost = rng.normal(size=(num_queries, num_gts))
            best_cost, _ = brute_force(cost)
            assert hungarian(cost).total_cost(cost) == pytest.approx(best_cost, abs=1e-12)

    def test_random_six_by_five(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            cost = rng.uniform(0.0, 10.0, size=(6, 5))
            best_cost, best = brute_force(cost)
            assignment = hungarian(cost)
            assert assignment.total_cost(cost) == pytest.approx(best_cost, abs=1e-12)
            assert tuple(assignment.query_indices) == best

    def test_assignment_is_injective(self, rng):
        cost = rng.normal(size=(9, 4))
        assignment = hungarian(cost)
        assert len(assignment) == 4
        assert len(set(assignment.query_indices.tolist())) == 4
        np.testing.assert_array_equal(assignment.gt_indices, np.arange(4))


class TestClassificationLoss:
    def test_confident_correct_logits(self):
        logits = np.full((3, 6), -20.0)
        logits[0, 2] = 20.0
        gt = GroundTruthSet([[0.5, 0.5, 0.2, 0.2]], [2])
        loss = classification_loss(Tensor(logits), MatchAssignment(((0, 0),)), gt)
        assert loss.item() <= 1e-6

    def test_background_only(self):
        loss = classification_loss(Tensor(np.full((4, 6), -20.0)), MatchAssignment(), empty_gt())
        assert loss.item() <= 1e-6

    def test_single_logit_at_zero(self):
        gt = GroundTruthSet([[0.5, 0.5, 0.2, 0.2]], [0])
        loss = classification_loss(Tensor([[0.0]]), MatchAssignment(((0, 0),)), gt)
        assert loss.item() == pytest.approx(0.25 * 0.5**2 * math.log(2.0), rel=1e-12)

    def test_normalized_by_ground_truth_count(self, rng):
        logits = rng.normal(size=(5, 6))
        gt = GroundTruthSet(random_boxes(rng, 2), [1, 4])
        assignment = MatchAssignment(((3, 0), (1, 1)))
        single = classification_loss(Tensor(logits), assignment, gt).item()
        ones = np.ones((5, 6))
        prob = 1.0 / (1.0 + np.exp(-logits))
        targets = np.zeros((5, 6))
        targets[3, 1] = targets[1, 4] = 1.0
        expected = (
            0.25 * targets * (1 - prob) ** 2 * -np.log(prob)
            + 0.75 * (ones - targets) * prob**2 * -np.log(1 - prob)
        ).sum() / 2
        assert single == pytest.approx(expected, rel=1e-10)


class TestBoxLosses:
    def test_perfect_boxes(self, rng):
        gt = GroundTruthSet(random_boxes(rng, 3), [0, 1, 2])
        assignment = MatchAssignment(((0, 0), (1, 1), (2, 2)))
        l1, giou_loss = box_losses(Tensor(gt.boxes), assignment, gt)
        assert l1.item() == 0.0
        assert giou_loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_no_pairs(self, rng):
        l1, giou_loss = box_losses(Tensor(random_boxes(rng, 3)), MatchAssignment(), empty_gt())
        assert (l1.item(), giou_loss.item()) == (0.0, 0.0)

    def test_shifted_box(self):
        gt = GroundTruthSet([[0.6, 0.5, 0.2, 0.2]], [0])
        l1, _ = box_losses(Tensor([[0.5, 0.5, 0.2, 0.2]]), MatchAssignment(((0, 0),)), gt)
        assert l1.item() == pytest.approx(0.1, abs=1e-12)

    def test_only_matched_queries_receive_box_gradients(self, rng):
        boxes = parameter(random_boxes(rng, 5))
        gt = GroundTruthSet(random_boxes(rng, 2), [0, 1])
        l1, giou_loss = box_losses(boxes, MatchAssignment(((4, 0), (1, 1))), gt)
        backward(l1 + giou_loss)
        touched = np.flatnonzero(np.abs(boxes.grad).sum(axis=1))
        np.testing.assert_array_equal(touched, [1, 4])


def synthetic_output(rng: np.random.Generator, layers: int = 1, queries: int = 5) -> ModelOutput:
    logits = [Tensor(rng.normal(size=(queries, 6))) for _ in range(layers)]
    boxes = [Tensor(random_boxes(rng, queries)) for _ in range(layers)]
    return ModelOutput(per_layer_logits=logits, per_layer_boxes=boxes)


class TestTotalLoss:
    def test_single_layer_equals_layer_loss(self, rng):
        output = synthetic_output(rng)
        gt = GroundTruthSet(random_boxes(rng, 2), [0, 3])
        layer_total, _, _ = Criterion().layer_loss(output.final_logits, output.final_boxes, gt)
        assert total_loss(output, gt).value == pytest.approx(layer_total.item(), rel=1e-15)

    def test_zero_box_weights_leave_classification(self, rng):
        output = synthetic_output(rng, layers=3)
        gt = GroundTruthSet(random_boxes(rng, 2), [0, 3])
        breakdown = total_loss(output, gt, lambda_l1=0.0, lambda_giou=0.0)
        assert breakdown.value == pytest.approx(breakdown.cls, rel=1e-12)
        assert len(breakdown.per_layer) == 3

    def test_duplicated_layer_doubles(self, rng):
        single = synthetic_output(rng)
        doubled = ModelOutput(
            per_layer_logits=single.per_layer_logits * 2,
            per_layer_boxes=single.per_layer_boxes * 2,
        )
        gt = GroundTruthSet(random_boxes(rng, 3), [1, 1, 5])
        assert total_loss(doubled, gt).value == pytest.approx(2 * total_loss(single, gt).value, rel=1e-14)

    def test_empty_ground_truth_is_classification_only(self, rng):
        breakdown = total_loss(synthetic_output(rng, layers=2), empty_gt())
        assert breakdown.l1 == 0.0 and breakdown.giou == 0.0
        assert breakdown.value == pytest.approx(breakdown.cls)
        assert all(len(a) == 0 for a in breakdown.assignments)

    def test_ground_truth_order_does_not_matter(self, rng):
        detector = Detector(tiny_model())
        output = detector(rng.uniform(size=(3, 16, 16)))
        gt = GroundTruthSet(random_boxes(rng, 3), [0, 2, 5])
        shuffled = gt.permuted(np.array([2, 0, 1]))
        assert abs(total_loss(output, gt).value - total_loss(output, shuffled).value) <= 1e-12

    def test_differentiable_in_the_boxes(self, rng):
        logits = Tensor(rng.normal(size=(5, 6)))
        gt = GroundTruthSet(random_boxes(rng, 2), [2, 4])
        raw = rng.normal(size=(5, 4))
        base = match(logits, F.sigmoid(raw), gt)

        def loss(x):
            boxes = F.sigmoid(x)
            assert match(logits, boxes, gt) == base
            return total_loss(ModelOutput([logits], [boxes]), gt).total

        assert finite_difference_check(loss, raw) <= 1e-4

    def test_no_layers(self):
        with pytest.raises(ValueError, match="no decoder layers"):
            total_loss(ModelOutput([], []), empty_gt())


class TestEncoderLoss:
    def test_needs_a_full_forward_pass(self, rng):
        with pytest.raises(ValueError, match="full forward"):
            Criterion().encoder_loss(synthetic_output(rng), empty_gt())

    def test_reaches_the_encoder_score_head(self, rng):
        detector = Detector(tiny_model())
        output = detector(rng.uniform(size=(3, 16, 16)))
        gt = GroundTruthSet(random_boxes(rng, 2), [1, 3])
        loss = Criterion().encoder_loss(output, gt)
        assert loss.item() > 0.0
        backward(loss)
        assert np.abs(detector.params["encoder.score_head.weight"].grad).sum() > 0.0
        assert detector.params["decoder.layers.0.score_head.weight"].grad is None
