"""
Deterministic training loop.

One step: forward every image of the batch, sum the per-layer matched loss
(plus the encoder selection loss when enabled), average over the batch,
backward, clip, AdamW update at the scheduled lr. The data order of epoch
`e` is a permutation drawn from the stream (seed, e), so two runs with the
same config write identical metrics.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src.analysis import ActivationStats, ActivationTracker, cost_report
from src.autodiff import Tensor, backward
from src.config import RunConfig
from src.constants import (
    ACTIVATION_FILE,
    CONFIG_FILE,
    COST_FILE,
    LAST_CHECKPOINT,
    METRICS_FILE,
    RARE_CLASS_ID,
    QueryMode,
    RngStream,
)
from src.data import DetectionSplit
from src.errors import DatasetError, TrainingDivergedError
from src.evaluation import evaluate_split
from src.matching import CostWeights, Criterion, GroundTruthSet, MatchAssignment
from src.model import Detector
from src.model.parameters import PAQ_PREFIX
from src.rng import RNG_NAME, make_rng
from src.training.checkpoint import save_checkpoint
from src.training.optim import AdamW, clip_gradients, learning_rate

logger = logging.getLogger(__name__)


def epoch_checkpoint_name(epoch: int) -> str:
    return f"epoch_{epoch:03d}.ckpt"


@dataclass
class StepResult:
    loss: float
    cls: float
    l1: float
    giou: float
    encoder: float
    grad_norm: float
    lr: float
    assignments: list[MatchAssignment]  # final decoder layer, one per image
    pattern_grad: np.ndarray | None = None


@dataclass
class TrainResult:
    detector: Detector
    history: list[dict] = field(default_factory=list)
    activation: list[ActivationStats] = field(default_factory=list)
    run_dir: Path | None = None

    @property
    def losses(self) -> list[float]:
        return [record["train_loss"] for record in self.history]


class Trainer:
    def __init__(self, config: RunConfig, detector: Detector | None = None):
        self.config = config
        self.detector = detector or Detector(config.model)
        tc = config.train
        self.criterion = Criterion(
            lambda_l1=tc.lambda_l1,
            lambda_giou=tc.lambda_giou,
            cost_weights=CostWeights(tc.cost_class, tc.cost_l1, tc.cost_giou),
            alpha=tc.focal_alpha,
            gamma=tc.focal_gamma,
        )
        self.optimizer = AdamW(
            self.detector.params,
            lr=tc.lr,
            betas=tc.betas,
            eps=tc.adam_eps,
            weight_decay=tc.weight_decay,
        )
        self.step = 0
        self.total_steps = 1

    @property
    def is_paq(self) -> bool:
        return self.detector.mode == QueryMode.PAQ

    def epoch_order(self, epoch: int, n: int) -> np.ndarray:
        return make_rng(RngStream.EPOCH_ORDER, self.config.train.seed, epoch).permutation(n)

    def rng_state(self, epoch: int) -> dict:
        return {"generator": RNG_NAME, "seed": self.config.train.seed, "epoch": epoch, "step": self.step}

    def train_step(
        self,
        images: list[np.ndarray],
        gts: list[GroundTruthSet],
        tracker: ActivationTracker | None = None,
    ) -> StepResult:
        tc = self.config.train
        self.detector.zero_grad()
        total: Tensor | None = None
        parts = {"cls": 0.0, "l1": 0.0, "giou": 0.0, "encoder": 0.0}
        assignments: list[MatchAssignment] = []
        for image, gt in zip(images, gts, strict=True):
            output = self.detector(image)
            breakdown = self.criterion(output, gt)
            loss = breakdown.total
            if tc.encoder_aux_loss:
                encoder_loss = self.criterion.encoder_loss(output, gt)
                loss = loss + encoder_loss
                parts["encoder"] += encoder_loss.item()
            parts["cls"] += breakdown.cls
            parts["l1"] += breakdown.l1
            parts["giou"] += breakdown.giou
            total = loss if total is None else total + loss
            assignments.append(breakdown.assignments[-1])
            if tracker is not None and output.weights is not None:
                tracker.record_weights(output.weights.data, breakdown.assignments[-1], gt.labels)

        scale = 1.0 / len(images)
        batch_loss = total * scale
        value = batch_loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"loss became {value} at step {self.step}")
        backward(batch_loss)

        patterns = self.detector.params.get(f"{PAQ_PREFIX}patterns")
        pattern_grad = None
        if patterns is not None:
            pattern_grad = np.zeros_like(patterns.data) if patterns.grad is None else patterns.grad.copy()
        grad_norm = clip_gradients(self.detector.parameters(), tc.grad_clip)
        if not math.isfinite(grad_norm):
            raise TrainingDivergedError(f"gradient norm became {grad_norm} at step {self.step}")

        lr = learning_rate(tc.lr_schedule, self.step, self.total_steps, tc.lr)
        self.optimizer.step(lr)
        self.step += 1
        return StepResult(
            loss=value,
            cls=parts["cls"] * scale,
            l1=parts["l1"] * scale,
            giou=parts["giou"] * scale,
            encoder=parts["encoder"] * scale,
            grad_norm=grad_norm,
            lr=lr,
            assignments=assignments,
            pattern_grad=pattern_grad,
        )

    def fit(
        self,
        train_split: DetectionSplit,
        val_split: DetectionSplit | None = None,
        out_dir: str | Path | None = None,
    ) -> TrainResult:
        """
        Train for `config.train.epochs` epochs, evaluating on `val_split` after each.

        With `out_dir`, writes config.json, cost_report.json, metrics.jsonl,
        activation.jsonl, epoch_XXX.ckpt and last.ckpt (initial parameters are
        saved as last.ckpt before the first step, so a diverged run always
        leaves a last good checkpoint).
        """
        cfg = self.config
        tc = cfg.train
        images = train_split.images
        scenes = train_split.annotations
        if tc.max_train_images is not None:
            images, scenes = images[: tc.max_train_images], scenes[: tc.max_train_images]
        if not scenes:
            raise DatasetError(f"training split {train_split.name!r} is empty")
        gts = [scene.to_ground_truth() for scene in scenes]
        n = len(scenes)
        steps_per_epoch = math.ceil(n / tc.batch_size)
        self.total_steps = tc.epochs * steps_per_epoch

        run_dir = Path(out_dir) if out_dir is not None else None
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            for stale in sorted(run_dir.glob("epoch_*.ckpt")):
                logger.info("removing %s from an earlier run", stale)
                stale.unlink()
            (run_dir / CONFIG_FILE).write_text(json.dumps(cfg.model_dump(mode="json"), indent=2))
            (run_dir / COST_FILE).write_text(json.dumps(cost_report(cfg.model).to_dict(), indent=2))
            for name in (METRICS_FILE, ACTIVATION_FILE):
                (run_dir / name).write_text("")
            save_checkpoint(run_dir / LAST_CHECKPOINT, self.detector, 0, self.rng_state(0), cfg)

        logger.info(
            "training %s detector (%d parameters) on %d images: %d epochs x %d steps",
            self.detector.mode, self.detector.num_parameters(), n, tc.epochs, steps_per_epoch,
        )
        result = TrainResult(detector=self.detector, run_dir=run_dir)
        for epoch in range(1, tc.epochs + 1):
            tracker = ActivationTracker(
                num_queries=cfg.model.num_queries,
                num_patterns=cfg.model.num_patterns if self.is_paq else 0,
                num_classes=cfg.model.num_classes,
            )
            order = self.epoch_order(epoch, n)
            steps: list[StepResult] = []
            for start in range(0, n, tc.batch_size):
                batch = order[start : start + tc.batch_size]
                try:
                    step = self.train_step([images[i] for i in batch], [gts[i] for i in batch], tracker)
                except TrainingDivergedError:
                    if run_dir is not None:
                        logger.error("training diverged; last good checkpoint is %s", run_dir / LAST_CHECKPOINT)
                    raise
                tracker.record_step(step.assignments, step.pattern_grad)
                steps.append(step)

            stats = tracker.summary(cfg.analysis.track_pattern_specialization)
            record = self._epoch_record(epoch, steps, stats, val_split)
            result.history.append(record)
            result.activation.append(stats)
            if run_dir is not None:
                self._write_epoch(run_dir, epoch, record, stats)
            logger.info(
                "epoch %d/%d loss %.4f map50 %s matched %.2f",
                epoch, tc.epochs, record["train_loss"],
                "n/a" if record["map50"] is None else f"{record['map50']:.4f}",
                record["matched_fraction"],
            )
        return result

    def _epoch_record(
        self,
        epoch: int,
        steps: list[StepResult],
        stats: ActivationStats,
        val_split: DetectionSplit | None,
    ) -> dict:
        record = {
            "epoch": epoch,
            "step": self.step,
            "lr": steps[-1].lr,
            "train_loss": float(np.mean([s.loss for s in steps])),
            "loss_cls": float(np.mean([s.cls for s in steps])),
            "loss_l1": float(np.mean([s.l1 for s in steps])),
            "loss_giou": float(np.mean([s.giou for s in steps])),
            "loss_encoder": float(np.mean([s.encoder for s in steps])),
            "grad_norm": float(np.mean([s.grad_norm for s in steps])),
            "matched_fraction": stats.matched_fraction,
            "gini_query_matches": stats.gini_query_matches,
            "gini_pattern_grads": stats.gini_pattern_grads,
            "map50": None,
            "map5095": None,
            "precision": None,
            "recall": None,
            "rare_ap50": None,
            "per_class_ap50": None,
        }
        if val_split is not None and len(val_split):
            ap = evaluate_split(self.detector, val_split, self.config.eval)
            record.update(
                map50=ap.map50,
                map5095=ap.map5095,
                precision=ap.precision,
                recall=ap.recall,
                rare_ap50=ap.per_class_ap50.get(RARE_CLASS_ID),
                per_class_ap50={str(c): v for c, v in ap.per_class_ap50.items()},
            )
        return record

    def _write_epoch(self, run_dir: Path, epoch: int, record: dict, stats: ActivationStats) -> None:
        with (run_dir / METRICS_FILE).open("a") as fh:
            fh.write(json.dumps(record) + "\n")
        with (run_dir / ACTIVATION_FILE).open("a") as fh:
            fh.write(json.dumps({"epoch": epoch, **stats.to_dict()}) + "\n")
        state = self.rng_state(epoch)
        save_checkpoint(run_dir / epoch_checkpoint_name(epoch), self.detector, epoch, state, self.config)
        save_checkpoint(run_dir / LAST_CHECKPOINT, self.detector, epoch, state, self.config)


def train(
    config: RunConfig,
    train_split: DetectionSplit,
    val_split: DetectionSplit | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    return Trainer(config).fit(train_split, val_split, out_dir)
