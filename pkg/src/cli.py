"""
Command-line entry point.

    uv run python -m src.cli gen-data --out data/
    uv run python -m src.cli train --data data/ --mode paq --out runs/paq-0
    uv run python -m src.cli eval --checkpoint runs/paq-0/last.ckpt --split data/test
    uv run python -m src.cli ab-report --run-a runs/baseline-0 --run-b runs/paq-0

Exit codes: 0 success, 2 invalid input (config, files, flags), 3 runtime failure.
"""

import argparse
import json
import logging
import os
import sys
from collections.abc import Callable, Sequence
from pathlib import Path

import pydantic
from dotenv import load_dotenv

from src.analysis import ab_report, cost_report, load_run, run_gradcheck, tiny_model_config, write_curves
from src.config import ModelConfig, RunConfig
from src.constants import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_VALIDATION,
    NUM_CLASSES,
    Command,
    QueryMode,
    battery_classes,
)
from src.data import generate_dataset, load_annotations, load_split, write_dataset
from src.errors import CheckpointError, ConfigError, DatasetError, GradientCheckError, PaQError
from src.evaluation import APResult, compute_map, load_detections, predict_split, save_detections
from src.training import load_checkpoint, train

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = Path(__file__).parent / "config" / "templates" / "run_config.json"


# -- printing --


def _fmt(value: float | int | None, digits: int = 3) -> str:
    if value is None:
        return "-"
    if isinstance(value, int):
        return f"{value:,}"
    return f"{value:.{digits}f}"


def format_table(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(c)) for c in column) for column in zip(headers, *rows, strict=True)]
    line = "  ".join("-" * w for w in widths)
    out = ["  ".join(str(h).ljust(w) for h, w in zip(headers, widths, strict=True)), line]
    for row in rows:
        cells = [
            str(c).rjust(w) if i else str(c).ljust(w)
            for i, (c, w) in enumerate(zip(row, widths, strict=True))
        ]
        out.append("  ".join(cells))
    return "\n".join(out)


def format_ap_table(ap: APResult) -> str:
    """Per-class AP50 / AP50:95 with instance counts and an aggregate row."""
    rows = [
        [c.name, _fmt(ap.gt_counts.get(c.class_id, 0)), _fmt(ap.per_class_ap50.get(c.class_id)),
         _fmt(ap.per_class_ap5095.get(c.class_id))]
        for c in battery_classes
    ]
    rows.append(["All", _fmt(sum(ap.gt_counts.values())), _fmt(ap.map50), _fmt(ap.map5095)])
    return format_table(["Class", "Instances", "AP50", "AP50:95"], rows)


# -- config --


def _load_config(path: str | None, assignments: Sequence[str] | None = None) -> RunConfig:
    return RunConfig.from_file(path or DEFAULT_CONFIG).with_assignments(assignments or [])


def _ensure_empty(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise DatasetError(f"{out} exists and is not empty (use --force to overwrite)")


# -- commands --


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config, args.set)
    if args.seed is not None:
        cfg = cfg.with_overrides(data={"seed": args.seed})
    dataset = generate_dataset(cfg.data)
    write_dataset(dataset, args.out, force=args.force)

    counts = {split: dataset.class_counts(split) for split in dataset.splits}
    total = sum(int(c.sum()) for c in counts.values())
    rows = []
    for c in battery_classes:
        n = sum(int(split_counts[c.class_id]) for split_counts in counts.values())
        rows.append([c.name, *(_fmt(int(counts[s][c.class_id])) for s in counts), _fmt(n),
                     f"{100 * n / max(total, 1):.1f}%"])
    rows.append(["All", *(_fmt(int(counts[s].sum())) for s in counts), _fmt(total), "100.0%"])
    print(format_table(["Class", *counts, "Total", "Share"], rows))
    print(f"\nwrote {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config, args.set)
    if args.mode is not None:
        cfg = cfg.with_mode(args.mode)
    if args.seed is not None:
        cfg = cfg.with_overrides(model={"seed": args.seed}, train={"seed": args.seed})
    if args.epochs is not None:
        cfg = cfg.with_overrides(train={"epochs": args.epochs})

    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise DatasetError(f"dataset directory {data_dir} does not exist (run gen-data first)")
    train_split = load_split(data_dir / "train")
    val_split = load_split(data_dir / "val") if (data_dir / "val").is_dir() else None
    out = Path(args.out)
    _ensure_empty(out, args.force)

    result = train(cfg, train_split, val_split, out)
    final = result.history[-1]
    print(format_table(
        ["Mode", "Epochs", "Loss", "mAP@50", "mAP@50:95", "Matched", "Gini (queries)", "Gini (patterns)"],
        [[str(cfg.model.mode), str(final["epoch"]), _fmt(final["train_loss"], 4), _fmt(final["map50"]),
          _fmt(final["map5095"]), _fmt(final["matched_fraction"]), _fmt(final["gini_query_matches"]),
          _fmt(final["gini_pattern_grads"])]],
    ))
    print(f"\nwrote {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    split_dir = Path(args.split)
    if args.detections:
        cfg = _load_config(args.config, args.set)
        scenes = load_annotations(split_dir / "annotations.json")
        if not scenes:
            raise DatasetError(f"split {split_dir} has no images")
        detections = load_detections(args.detections)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --detections")
        checkpoint = load_checkpoint(args.checkpoint)
        if args.config:
            cfg = _load_config(args.config, args.set)
            if cfg.model != checkpoint.model_config:
                raise CheckpointError(
                    f"{args.checkpoint} was trained as a {checkpoint.model_config.mode} detector with a "
                    f"different model config than {args.config}"
                )
        else:
            cfg = checkpoint.run_config or _load_config(None).with_overrides(
                model=checkpoint.model_config.model_dump(mode="json"),
                train={"mode": str(checkpoint.model_config.mode)},
                data={"image_size": checkpoint.model_config.image_size},
            )
            cfg = cfg.with_assignments(args.set)
        detector = checkpoint.build_detector(cfg.model)
        split = load_split(split_dir)
        scenes = split.annotations
        detections = predict_split(detector, split, cfg.eval)
        if args.save_detections:
            save_detections(args.save_detections, detections)

    ap = compute_map(detections, scenes, NUM_CLASSES, cfg.eval.operating_score)
    print(format_ap_table(ap))
    print(f"\nprecision {_fmt(ap.precision)}  recall {_fmt(ap.recall)}  (score >= {cfg.eval.operating_score})")
    if args.out:
        Path(args.out).write_text(json.dumps({"split": str(split_dir), **ap.to_dict()}, indent=2))
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    run = load_run(args.run_dir)
    out = Path(args.out) if args.out else run.run_dir / "curves.csv"
    write_curves(run, out)
    final = run.final
    print(format_table(
        ["Epochs", "Matched", "Gini (queries)", "Gini (patterns)", "mAP@50"],
        [[str(len(run.history)), _fmt(final.get("matched_fraction")), _fmt(final.get("gini_query_matches")),
          _fmt(final.get("gini_pattern_grads")), _fmt(final.get("map50"))]],
    ))
    print(f"\nwrote {out}")
    return EXIT_OK


def cmd_ab_report(args: argparse.Namespace) -> int:
    report = ab_report([load_run(p) for p in args.run_a], [load_run(p) for p in args.run_b])
    rows = []
    for row in report.rows:
        digits = 0 if isinstance(row.a, int) else 3
        delta = row.delta
        rows.append([row.metric, _fmt(row.a, digits), _fmt(row.b, digits),
                     "-" if delta is None else (f"{delta:+,}" if isinstance(delta, int) else f"{delta:+.3f}")])
    print(format_table(["Metric", f"A ({report.mode_a})", f"B ({report.mode_b})", "Delta"], rows))
    print(f"\nB >= A on mAP@50 in {report.b_wins_map50} of {report.pairs} paired run(s)")
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def _gradcheck_model(full: RunConfig, mode: QueryMode, seed: int, scale: str) -> ModelConfig:
    if scale == "tiny":
        return tiny_model_config(mode, seed)
    return ModelConfig.model_validate({**full.model.model_dump(mode="json"), "mode": str(mode), "seed": seed})


def cmd_gradcheck(args: argparse.Namespace) -> int:
    full = _load_config(args.config, args.set)
    cfg = full.analysis
    samples = args.samples or cfg.gradcheck_samples
    modes = [QueryMode(args.mode)] if args.mode else list(QueryMode)
    rows = []
    failures = []
    for mode in modes:
        report = run_gradcheck(
            mode=mode,
            n_samples=samples,
            seed=args.seed,
            eps=cfg.gradcheck_eps,
            tolerance=cfg.gradcheck_tolerance,
            config=_gradcheck_model(full, mode, args.seed, args.scale),
            corrupt_gradient=args.corrupt_gradient,
        )
        rows.append([str(mode), str(len(report.probes)), str(report.redrawn), f"{report.max_error:.3e}",
                     "pass" if report.passed else "FAIL"])
        if not report.passed:
            failures.append(f"{mode}: {report.describe_worst()}")
    print(format_table(["Mode", "Probes", "Redrawn", "Max rel. error", "Result"], rows))
    if failures:
        raise GradientCheckError(
            f"gradient check exceeded tolerance {cfg.gradcheck_tolerance:g}; worst offender " + "; ".join(failures)
        )
    return EXIT_OK


def cmd_cost_report(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config, args.set)
    if args.mode is not None:
        cfg = cfg.with_mode(args.mode)
    report = cost_report(cfg.model)
    rows = [
        ["total parameters", _fmt(report.total_params)],
        ["pattern bank + weight generator", _fmt(report.paq_params)],
        *([f"  {term}", _fmt(n)] for term, n in (report.paq_param_terms or {}).items()),
        ["MACs per forward", _fmt(report.total_flops)],
        *([f"  {part}", _fmt(n)] for part, n in (report.flops_by_part or {}).items()),
        ["paq share of MACs", f"{100 * (report.paq_flop_fraction or 0.0):.2f}%"],
    ]
    print(format_table([f"Cost ({cfg.model.mode})", "Count"], rows))
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def cmd_config_schema(args: argparse.Namespace) -> int:
    print(json.dumps(RunConfig.json_schema(), indent=2))
    return EXIT_OK


HANDLERS: dict[Command, Callable[[argparse.Namespace], int]] = {
    Command.GEN_DATA: cmd_gen_data,
    Command.TRAIN: cmd_train,
    Command.EVAL: cmd_eval,
    Command.ANALYZE: cmd_analyze,
    Command.AB_REPORT: cmd_ab_report,
    Command.GRADCHECK: cmd_gradcheck,
    Command.COST_REPORT: cmd_cost_report,
    Command.CONFIG_SCHEMA: cmd_config_schema,
}


SET_HELP = "override one config field, e.g. train.lr=1e-3 (repeatable; values are parsed as JSON)"

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="src.cli", description=__doc__.splitlines()[1])
    sub = parser.add_subparsers(dest="command", required=True)
    modes = [str(m) for m in QueryMode]

    p = sub.add_parser(Command.GEN_DATA, help="generate the synthetic long-tailed dataset")
    p.add_argument("--config", help="run config JSON (default: the bundled template)")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--seed", type=int, help="override data.seed")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty --out")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help=SET_HELP)

    p = sub.add_parser(Command.TRAIN, help="train one detector and write a run directory")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="dataset directory written by gen-data")
    p.add_argument("--mode", choices=modes, help="override model.mode and train.mode")
    p.add_argument("--seed", type=int, help="override model.seed and train.seed")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--force", action="store_true")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help=SET_HELP)

    p = sub.add_parser(Command.EVAL, help="per-class AP of a checkpoint or a detections file")
    p.add_argument("--checkpoint")
    p.add_argument("--detections", help="evaluate this detections JSON instead of a checkpoint")
    p.add_argument("--split", required=True, help="split directory with annotations.json")
    p.add_argument("--config", help="must match the checkpoint's model config when given")
    p.add_argument("--out", help="write the metrics JSON here")
    p.add_argument("--save-detections", help="also write the checkpoint's detections JSON here")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help=SET_HELP)

    p = sub.add_parser(Command.ANALYZE, help="per-epoch activation and accuracy curves as CSV")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", help="CSV path (default: RUN_DIR/curves.csv)")

    p = sub.add_parser(Command.AB_REPORT, help="compare two arms of runs side by side")
    p.add_argument("--run-a", nargs="+", required=True, help="run directories of arm A")
    p.add_argument("--run-b", nargs="+", required=True, help="run directories of arm B, paired by position")
    p.add_argument("--out", help="write the report JSON here")

    p = sub.add_parser(Command.GRADCHECK, help="whole-model finite-difference gradient check")
    p.add_argument("--config")
    p.add_argument(
        "--scale", choices=["tiny", "config"], default="tiny",
        help="tiny: the fixed d=8 check model; config: the model section of --config",
    )
    p.add_argument("--mode", choices=modes, help="check one mode (default: both)")
    p.add_argument("--samples", type=int, help="coordinates per mode (default: analysis.gradcheck_samples)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help=SET_HELP)

    p = sub.add_parser(Command.COST_REPORT, help="parameter and MAC accounting of a config")
    p.add_argument("--config")
    p.add_argument("--mode", choices=modes)
    p.add_argument("--out")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help=SET_HELP)

    sub.add_parser(Command.CONFIG_SCHEMA, help="print the run config JSON schema")
    return parser


def _configure_logging() -> None:
    load_dotenv(".env")
    name = os.getenv("PAQ_LOG_LEVEL", "INFO").upper()
    level = logging.getLevelNamesMapping().get(name, logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    logger.debug("command %s with %s", args.command, vars(args))
    try:
        return HANDLERS[Command(args.command)](args)
    except pydantic.ValidationError as err:
        print(f"error: invalid configuration\n{err}", file=sys.stderr)
        return EXIT_VALIDATION
    except PaQError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION if isinstance(err, ValueError) else EXIT_RUNTIME
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
