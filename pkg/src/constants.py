"""Global application static values"""

from enum import IntEnum, StrEnum
from typing import Final, NamedTuple


class QueryMode(StrEnum):
    """How decoder content queries are produced."""

    BASELINE = "baseline"
    PAQ = "paq"


class RngStream(IntEnum):
    """Leading key of every random stream, so no two purposes share one."""

    PARAMS = 1
    SCENE = 2
    EPOCH_ORDER = 3
    GRADCHECK = 4


class Command(StrEnum):
    """Sub-commands of `python -m src.cli`."""

    GEN_DATA = "gen-data"
    TRAIN = "train"
    EVAL = "eval"
    ANALYZE = "analyze"
    AB_REPORT = "ab-report"
    GRADCHECK = "gradcheck"
    COST_REPORT = "cost-report"
    CONFIG_SCHEMA = "config-schema"


class BatteryClass(NamedTuple):
    """A synthetic stand-in for one battery category."""

    class_id: int
    name: str
    glyph: str
    val_instances: int


# Validation-split instance counts (of 952) drive the default class probabilities.
battery_classes: tuple[BatteryClass, ...] = (
    BatteryClass(0, "Automotive Battery", "wide_rectangle", 159),
    BatteryClass(1, "Bike Battery", "triangle", 6),
    BatteryClass(2, "Dry Cell", "tall_cylinder", 415),
    BatteryClass(3, "Laptop Battery", "ellipse", 60),
    BatteryClass(4, "Smart Phone", "small_square", 86),
    BatteryClass(5, "Toy Battery", "short_cylinder", 226),
)

NUM_CLASSES: Final[int] = len(battery_classes)
_TOTAL_VAL_INSTANCES: Final[int] = sum(c.val_instances for c in battery_classes)
DEFAULT_CLASS_PROBS: Final[tuple[float, ...]] = tuple(
    c.val_instances / _TOTAL_VAL_INSTANCES for c in battery_classes
)
RARE_CLASS_ID: Final[int] = 1

COCO_IOU_THRESHOLDS: Final[tuple[float, ...]] = tuple(
    round(0.5 + 0.05 * i, 2) for i in range(10)
)
RECALL_POINTS: Final[int] = 101

CHECKPOINT_MAGIC: Final[bytes] = b"PAQD"
CHECKPOINT_VERSION: Final[int] = 1

# CLI exit codes
EXIT_OK: Final[int] = 0
EXIT_VALIDATION: Final[int] = 2
EXIT_RUNTIME: Final[int] = 3

# Run directory layout
METRICS_FILE: Final[str] = "metrics.jsonl"
ACTIVATION_FILE: Final[str] = "activation.jsonl"
CONFIG_FILE: Final[str] = "config.json"
COST_FILE: Final[str] = "cost_report.json"
LAST_CHECKPOINT: Final[str] = "last.ckpt"
