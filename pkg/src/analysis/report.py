"""Reports over finished run directories: per-epoch curves and the A/B comparison."""

import csv
import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pydantic

from src.analysis.cost import count_flops, count_params
from src.config import RunConfig
from src.constants import CONFIG_FILE, METRICS_FILE, QueryMode, battery_classes
from src.errors import ReportError

CURVE_COLUMNS: tuple[str, ...] = (
    "epoch",
    "train_loss",
    "loss_cls",
    "loss_l1",
    "loss_giou",
    "loss_encoder",
    "lr",
    "matched_fraction",
    "gini_query_matches",
    "gini_pattern_grads",
    "map50",
    "map5095",
    "rare_ap50",
)

_SUMMARY_METRICS: tuple[str, ...] = (
    "map50",
    "map5095",
    "precision",
    "recall",
    "rare_ap50",
    "matched_fraction",
    "gini_query_matches",
    "gini_pattern_grads",
)


@dataclass
class RunSummary:
    run_dir: Path
    config: RunConfig
    history: list[dict]

    @property
    def mode(self) -> QueryMode:
        return self.config.model.mode

    @property
    def final(self) -> dict:
        return self.history[-1]


def read_metrics(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / METRICS_FILE
    if not path.is_file():
        raise ReportError(f"{run_dir}: no {METRICS_FILE}")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as err:
            raise ReportError(f"{path}:{lineno}: {err.msg}") from err
    if not records:
        raise ReportError(f"{path} has no epochs")
    return records


def load_run(run_dir: str | Path) -> RunSummary:
    run_dir = Path(run_dir)
    config_path = run_dir / CONFIG_FILE
    if not config_path.is_file():
        raise ReportError(f"{run_dir}: no {CONFIG_FILE}")
    try:
        config = RunConfig.model_validate_json(config_path.read_text())
    except pydantic.ValidationError as err:
        raise ReportError(f"{config_path}: {err.errors()[0]['msg']}") from err
    return RunSummary(run_dir=run_dir, config=config, history=read_metrics(run_dir))


def write_curves(run: RunSummary, path: str | Path) -> Path:
    """One CSV row per epoch with the loss, imbalance and accuracy curves."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for record in run.history:
            writer.writerow({k: "" if record.get(k) is None else record[k] for k in CURVE_COLUMNS})
    return path


def _mean(values: Sequence[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


class ABRow(NamedTuple):
    metric: str
    a: float | None
    b: float | None

    @property
    def delta(self) -> float | None:
        if self.a is None or self.b is None:
            return None
        return self.b - self.a


@dataclass
class ABReport:
    mode_a: str
    mode_b: str
    rows: list[ABRow]
    pairs: int
    b_wins_map50: int
    per_seed_map50: list[tuple[float | None, float | None]] = field(default_factory=list)

    def row(self, metric: str) -> ABRow:
        return next(r for r in self.rows if r.metric == metric)

    def to_dict(self) -> dict:
        return {
            "mode_a": self.mode_a,
            "mode_b": self.mode_b,
            "pairs": self.pairs,
            "b_wins_map50": self.b_wins_map50,
            "per_seed_map50": [list(p) for p in self.per_seed_map50],
            "rows": [{"metric": r.metric, "a": r.a, "b": r.b, "delta": r.delta} for r in self.rows],
        }


def _arm_label(runs: Sequence[RunSummary]) -> str:
    return "/".join(sorted({str(r.mode) for r in runs}))


def ab_report(runs_a: Sequence[RunSummary], runs_b: Sequence[RunSummary]) -> ABReport:
    """
    Side-by-side final-epoch metrics of two arms, averaged over runs and
    paired by position for the per-seed mAP@50 comparison.
    """
    if not runs_a or not runs_b:
        raise ReportError("each arm needs at least one run")
    if len(runs_a) != len(runs_b):
        raise ReportError(f"arms are not paired: {len(runs_a)} runs vs {len(runs_b)}")

    def arm_mean(runs: Sequence[RunSummary], key: str) -> float | None:
        return _mean([r.final.get(key) for r in runs])

    def class_mean(runs: Sequence[RunSummary], class_id: int) -> float | None:
        return _mean([(r.final.get("per_class_ap50") or {}).get(str(class_id)) for r in runs])

    rows = [ABRow(key, arm_mean(runs_a, key), arm_mean(runs_b, key)) for key in _SUMMARY_METRICS]
    rows += [
        ABRow(f"ap50 {c.name}", class_mean(runs_a, c.class_id), class_mean(runs_b, c.class_id))
        for c in battery_classes
    ]
    params_a, params_b = count_params(runs_a[0].config.model), count_params(runs_b[0].config.model)
    flops_a, flops_b = count_flops(runs_a[0].config.model), count_flops(runs_b[0].config.model)
    rows += [
        ABRow("total_params", params_a.total_params, params_b.total_params),
        ABRow("paq_params", params_a.paq_params, params_b.paq_params),
        ABRow("total_flops", flops_a.total_flops, flops_b.total_flops),
        ABRow("paq_flops", flops_a.paq_flops, flops_b.paq_flops),
    ]

    per_seed = [(a.final.get("map50"), b.final.get("map50")) for a, b in zip(runs_a, runs_b, strict=True)]
    wins = sum(1 for a, b in per_seed if a is not None and b is not None and b >= a)
    return ABReport(
        mode_a=_arm_label(runs_a),
        mode_b=_arm_label(runs_b),
        rows=rows,
        pairs=len(per_seed),
        b_wins_map50=wins,
        per_seed_map50=per_seed,
    )