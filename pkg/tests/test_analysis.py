"""Activation statistics, cost accounting, the whole-model gradient check and run reports."""

import csv
import json

import numpy as np
import pytest

from src.analysis import (
    CURVE_COLUMNS,
    ActivationTracker,
    ab_report,
    cost_report,
    count_flops,
    count_params,
    gini,
    load_run,
    paq_param_formula,
    record_activation,
    run_gradcheck,
    write_curves,
)
from src.autodiff import backward
from src.config import ModelConfig, RunConfig
from src.constants import CONFIG_FILE, METRICS_FILE, QueryMode
from src.errors import ReportError
from src.matching import Criterion, GroundTruthSet, MatchAssignment
from src.model import Detector
from src.model.parameters import PAQ_PREFIX
from tests.conftest import tiny_model


class TestGini:
    def test_constant_vector(self):
        assert gini([3.0] * 7) == 0.0

    @pytest.mark.parametrize("n", [2, 5, 30])
    def test_one_hot_vector(self, n):
        values = np.zeros(n)
        values[n // 2] = 4.0
        assert gini(values) == pytest.approx((n - 1) / n)

    def test_degenerate_inputs(self):
        assert gini([]) == 0.0
        assert gini(np.zeros(4)) == 0.0

    def test_negative_values(self):
        with pytest.raises(ValueError, match="non-negative"):
            gini([1.0, -0.5])

    def test_bounded(self, rng):
        for _ in range(20):
            assert 0.0 <= gini(rng.exponential(size=12)) < 1.0


class TestRecordActivation:
    def test_every_query_matched_once(self):
        step = [MatchAssignment(((0, 0), (1, 1))), MatchAssignment(((2, 0), (3, 1)))]
        stats = record_activation([step], [], num_queries=4)
        np.testing.assert_array_equal(stats.match_counts, [1, 1, 1, 1])
        assert stats.gini_query_matches == 0.0
        assert stats.matched_fraction == 1.0
        assert stats.gini_pattern_grads is None

    def test_single_matched_query(self):
        stats = record_activation([[MatchAssignment(((2, 0),))]], [], num_queries=5)
        assert stats.matched_fraction == pytest.approx(1 / 5)
        assert stats.gini_query_matches == pytest.approx(4 / 5)

    def test_counts_accumulate_over_steps(self):
        steps = [[MatchAssignment(((1, 0),))], [MatchAssignment(((1, 0), (0, 1)))], [MatchAssignment()]]
        stats = record_activation(steps, [], num_queries=3)
        np.testing.assert_array_equal(stats.match_counts, [1, 2, 0])

    def test_pattern_gradients(self):
        grads = [np.array([[3.0, 4.0], [0.0, 0.0]]), np.array([[0.0, 0.0], [0.0, 5.0]])]
        stats = record_activation([[MatchAssignment()], [MatchAssignment()]], grads, num_queries=3)
        np.testing.assert_allclose(stats.cumulative_pattern_grad_norms, [5.0, 5.0])
        assert stats.gini_pattern_grads == 0.0

    def test_step_counts_must_agree(self):
        with pytest.raises(ValueError, match="steps"):
            record_activation([[MatchAssignment()]] * 2, [np.ones((2, 2))], num_queries=2)

    def test_uniform_weights_give_every_pattern_gradient(self, rng):
        detector = Detector(tiny_model())
        for name, tensor in detector.params.items():
            if name.startswith(f"{PAQ_PREFIX}wgen.fc2"):
                tensor.data[...] = 0.0
        gt = GroundTruthSet([[0.4, 0.6, 0.3, 0.2]], [2])
        breakdown = Criterion()(detector(rng.uniform(size=(3, 16, 16))), gt)
        backward(breakdown.total)
        grad = detector.params[f"{PAQ_PREFIX}patterns"].grad
        stats = record_activation([[breakdown.assignments[-1]]], [grad], num_queries=4)
        assert stats.matched_fraction == pytest.approx(1 / 4)
        assert np.all(stats.pattern_grad_norms[0] > 0.0)

    def test_pattern_specialization(self):
        tracker = ActivationTracker(num_queries=3, num_patterns=2, num_classes=3)
        weights = np.array([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]])
        tracker.record_weights(weights, MatchAssignment(((0, 0), (1, 1))), np.array([2, 2]))
        tracker.record_weights(weights, MatchAssignment(((2, 0),)), np.array([0]))
        stats = tracker.summary()
        assert set(stats.pattern_specialization) == {0, 2}
        np.testing.assert_allclose(stats.pattern_specialization[2], [0.55, 0.45])
        assert tracker.summary(track_specialization=False).pattern_specialization is None

    def test_serializable(self):
        tracker = ActivationTracker(num_queries=2, num_patterns=2, num_classes=1)
        tracker.record_step([MatchAssignment(((1, 0),))], np.ones((2, 3)))
        record = json.loads(json.dumps(tracker.summary().to_dict()))
        assert record["match_counts"] == [0, 1]
        assert len(record["pattern_grad_norms"]) == 2


class TestCost:
    def test_desk_scale_pattern_parameters(self):
        report = count_params(ModelConfig())
        assert report.paq_params == 512 + 4096 + 64 + 512 + 8 == 5192
        assert sum(report.paq_param_terms.values()) == report.paq_params

    def test_baseline_has_no_pattern_parameters(self):
        report = count_params(ModelConfig(mode=QueryMode.BASELINE))
        assert report.paq_params == 0
        assert paq_param_formula(ModelConfig(mode=QueryMode.BASELINE)) == {}

    def test_modes_differ_by_the_pattern_module(self):
        paq = count_params(ModelConfig())
        baseline = count_params(ModelConfig(mode=QueryMode.BASELINE))
        assert paq.total_params - baseline.total_params == paq.paq_params

    def test_doubling_patterns_doubles_the_bank(self):
        base = paq_param_formula(ModelConfig(num_patterns=8))
        doubled = paq_param_formula(ModelConfig(num_patterns=16))
        assert doubled["patterns (m*d)"] == 2 * base["patterns (m*d)"]

    @pytest.mark.parametrize("mode", list(QueryMode), ids=str)
    def test_enumeration_matches_the_detector(self, mode):
        config = tiny_model(mode)
        assert count_params(config).total_params == Detector(config).num_parameters()

    def test_desk_scale_pattern_macs(self):
        report = count_flops(ModelConfig())
        assert report.paq_flops == 122880 + 15360 + 15360 == 153600
        assert report.paq_flop_fraction < 0.05

    def test_baseline_has_no_pattern_macs(self):
        assert count_flops(ModelConfig(mode=QueryMode.BASELINE)).paq_flops == 0

    def test_combined_report(self):
        report = cost_report(ModelConfig()).to_dict()
        assert report["paq_params"] == 5192
        assert report["paq_flops"] == 153600
        assert report["mode"] == "paq"
        assert 0.0 < report["paq_param_fraction"] < 1.0


class TestGradcheck:
    @pytest.mark.parametrize("mode", list(QueryMode), ids=str)
    def test_tiny_model_passes(self, mode):
        report = run_gradcheck(mode, n_samples=20, seed=0)
        assert len(report.probes) == 20
        assert report.passed, report.describe_worst()
        assert report.max_error <= 1e-4

    def test_corrupted_gradient_fails(self):
        report = run_gradcheck(QueryMode.PAQ, n_samples=5, seed=0, corrupt_gradient=True)
        assert not report.passed
        assert "analytic" in report.describe_worst()


def fake_run(root, name: str, mode: str, history: list[dict]):
    run_dir = root / name
    run_dir.mkdir()
    config = RunConfig().with_mode(mode)
    (run_dir / CONFIG_FILE).write_text(json.dumps(config.model_dump(mode="json")))
    (run_dir / METRICS_FILE).write_text("".join(json.dumps(r) + "\n" for r in history))
    return run_dir


def epoch_record(epoch: int, map50: float, rare: float | None = 0.1) -> dict:
    return {
        "epoch": epoch,
        "train_loss": 5.0 / epoch,
        "map50": map50,
        "map5095": map50 / 2,
        "precision": 0.5,
        "recall": 0.4,
        "rare_ap50": rare,
        "matched_fraction": 0.6,
        "gini_query_matches": 0.3,
        "gini_pattern_grads": None,
        "per_class_ap50": {"0": map50, "1": rare},
    }


class TestReports:
    def test_curves_have_one_row_per_epoch(self, tmp_path):
        run_dir = fake_run(tmp_path, "a", "paq", [epoch_record(e, 0.1 * e) for e in (1, 2, 3)])
        out = write_curves(load_run(run_dir), tmp_path / "curves.csv")
        with out.open() as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert list(rows[0]) == list(CURVE_COLUMNS)
        assert rows[2]["gini_pattern_grads"] == ""

    def test_self_comparison_has_zero_deltas(self, tmp_path):
        history = [epoch_record(1, 0.2), epoch_record(2, 0.3)]
        a = load_run(fake_run(tmp_path, "a", "paq", history))
        b = load_run(fake_run(tmp_path, "b", "paq", history))
        report = ab_report([a], [b])
        assert all(row.delta in (0, 0.0, None) for row in report.rows)
        assert report.b_wins_map50 == 1

    def test_pattern_parameter_line(self, tmp_path):
        a = load_run(fake_run(tmp_path, "a", "baseline", [epoch_record(1, 0.2)]))
        b = load_run(fake_run(tmp_path, "b", "paq", [epoch_record(1, 0.25)]))
        report = ab_report([a], [b])
        assert report.row("paq_params").a == 0
        assert report.row("paq_params").b == sum(paq_param_formula(ModelConfig()).values())
        assert report.row("map50").delta == pytest.approx(0.05)
        assert report.row("ap50 Bike Battery").a == pytest.approx(0.1)
        assert (report.mode_a, report.mode_b) == ("baseline", "paq")

    def test_arms_average_over_seeds(self, tmp_path):
        runs_a = [load_run(fake_run(tmp_path, f"a{i}", "baseline", [epoch_record(1, v)])) for i, v in enumerate((0.2, 0.4))]
        runs_b = [load_run(fake_run(tmp_path, f"b{i}", "paq", [epoch_record(1, v)])) for i, v in enumerate((0.5, 0.1))]
        report = ab_report(runs_a, runs_b)
        assert report.row("map50").a == pytest.approx(0.3)
        assert report.pairs == 2 and report.b_wins_map50 == 1
        assert json.loads(json.dumps(report.to_dict()))["pairs"] == 2

    def test_unpaired_arms(self, tmp_path):
        run = load_run(fake_run(tmp_path, "a", "paq", [epoch_record(1, 0.2)]))
        with pytest.raises(ReportError, match="paired"):
            ab_report([run], [run, run])

    def test_missing_metrics(self, tmp_path):
        run_dir = fake_run(tmp_path, "a", "paq", [])
        (run_dir / METRICS_FILE).unlink()
        with pytest.raises(ReportError, match=METRICS_FILE):
            load_run(run_dir)

    def test_empty_metrics(self, tmp_path):
        with pytest.raises(ReportError, match="no epochs"):
            load_run(fake_run(tmp_path, "a", "paq", []))

    def test_missing_config(self, tmp_path):
        with pytest.raises(ReportError, match=CONFIG_FILE):
            load_run(tmp_path)
