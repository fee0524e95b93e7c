"""
Run configuration.

Every section is a frozen pydantic model that rejects unknown keys, so a
config file is fully validated before any work starts.
"""

import json
import math
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Literal, Self

from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.constants import DEFAULT_CLASS_PROBS, NUM_CLASSES, QueryMode
from src.errors import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Section):
    """
    Detector shape. Symbols: d=embed_dim, M=num_tokens, K=num_queries,
    m=num_patterns, L=num_layers, H=num_heads, C=num_classes.
    """

    image_size: int = Field(64, gt=0, description="input side length S (pixels)")
    patch_size: int = Field(8, gt=0, description="encoder patch side; M = (S / patch)^2")
    embed_dim: int = Field(64, gt=0, description="d")
    num_queries: int = Field(30, gt=0, description="K, queries kept by top-K selection")
    num_patterns: int = Field(8, gt=0, description="m, rows of the pattern bank")
    num_layers: int = Field(3, gt=0, description="L, decoder layers")
    num_heads: int = Field(4, gt=0, description="H, attention heads")
    num_classes: int = Field(NUM_CLASSES, gt=0, description="C")
    ffn_hidden: int = Field(128, gt=0, description="decoder/encoder FFN width")
    wgen_hidden: int = Field(64, gt=0, description="hidden width of the weight generator MLP")
    mode: QueryMode = QueryMode.PAQ
    anchor_size: float = Field(0.2, gt=0.0, le=1.0, description="w = h of the grid anchors")
    refresh_position_queries: bool = Field(
        True, description="recompute position queries from each layer's refined references"
    )
    pattern_init_std: float = Field(0.02, gt=0.0)
    seed: int = Field(0, ge=0, description="parameter initialization seed")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @model_validator(mode="after")
    def _check_shapes(self) -> Self:
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.num_queries > self.num_tokens:
            raise ValueError(
                f"num_queries {self.num_queries} exceeds num_tokens {self.num_tokens}"
            )
        if self.num_patterns >= self.num_queries:
            raise ValueError(
                f"num_patterns {self.num_patterns} must be smaller than num_queries {self.num_queries}"
            )
        return self


class TrainConfig(_Section):
    epochs: int = Field(40, gt=0)
    batch_size: int = Field(8, gt=0)
    lr: float = Field(2e-4, ge=0.0, description="base learning rate (0 freezes parameters)")
    weight_decay: float = Field(1e-4, ge=0.0)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0.0)
    grad_clip: float = Field(0.1, gt=0.0, description="max global gradient norm")
    lr_schedule: Literal["cosine", "constant"] = "cosine"
    seed: int = Field(0, ge=0)
    mode: QueryMode = QueryMode.PAQ
    lambda_l1: float = Field(5.0, ge=0.0)
    lambda_giou: float = Field(2.0, ge=0.0)
    cost_class: float = Field(2.0, ge=0.0)
    cost_l1: float = Field(5.0, ge=0.0)
    cost_giou: float = Field(2.0, ge=0.0)
    focal_alpha: float = Field(0.25, ge=0.0, le=1.0)
    focal_gamma: float = Field(2.0, ge=0.0)
    encoder_aux_loss: bool = Field(True, description="train the top-K score head on the selected tokens")
    max_train_images: int | None = Field(None, gt=0, description="cap on training images (smoke runs)")

    @model_validator(mode="after")
    def _check_betas(self) -> Self:
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        return self


class DatasetConfig(_Section):
    train_images: int = Field(700, ge=0)
    val_images: int = Field(200, ge=0)
    test_images: int = Field(100, ge=0)
    image_size: int = Field(64, gt=0)
    class_probs: tuple[float, ...] = DEFAULT_CLASS_PROBS
    min_objects: int = Field(1, ge=0)
    max_objects: int = Field(4, ge=0)
    seed: int = Field(0, ge=0)
    overlap_allowance: float = Field(0.3, ge=0.0, le=1.0, description="max pairwise IoU")
    max_placement_attempts: int = Field(100, gt=0)

    @property
    def split_sizes(self) -> dict[str, int]:
        return {"train": self.train_images, "val": self.val_images, "test": self.test_images}

    @model_validator(mode="after")
    def _check_distribution(self) -> Self:
        if len(self.class_probs) != NUM_CLASSES:
            raise ValueError(f"class_probs needs {NUM_CLASSES} entries, got {len(self.class_probs)}")
        if any(p < 0 for p in self.class_probs):
            raise ValueError(f"class_probs must be non-negative, got {self.class_probs}")
        if not math.isclose(sum(self.class_probs), 1.0, abs_tol=1e-6):
            raise ValueError(f"class_probs must sum to 1, got {sum(self.class_probs):.6f}")
        if self.min_objects > self.max_objects:
            raise ValueError(f"min_objects {self.min_objects} > max_objects {self.max_objects}")
        return self


class EvalConfig(_Section):
    score_threshold: float = Field(0.05, ge=0.0, le=1.0, description="detections kept at or above")
    max_detections: int = Field(30, gt=0)
    operating_score: float = Field(0.5, ge=0.0, le=1.0, description="precision/recall operating point")


class AnalysisConfig(_Section):
    track_pattern_specialization: bool = True
    gradcheck_samples: int = Field(20, gt=0)
    gradcheck_eps: float = Field(1e-5, gt=0.0, le=1e-2)
    gradcheck_tolerance: float = Field(1e-4, gt=0.0)


def parse_assignment(text: str) -> tuple[str, str, Any]:
    """Split ``section.key=value`` into its parts; the value is JSON when it parses."""
    target, sep, raw = text.partition("=")
    section, dot, key = target.strip().partition(".")
    if not sep or not dot or not section or not key:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value


class RunConfig(_Section):
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: DatasetConfig = DatasetConfig()
    eval: EvalConfig = EvalConfig()
    analysis: AnalysisConfig = AnalysisConfig()

    @model_validator(mode="after")
    def _check_consistency(self) -> Self:
        if self.model.mode != self.train.mode:
            raise ValueError(f"model.mode {self.model.mode} != train.mode {self.train.mode}")
        if self.model.image_size != self.data.image_size:
            raise ValueError(
                f"model.image_size {self.model.image_size} != data.image_size {self.data.image_size}"
            )
        if self.model.num_classes != len(self.data.class_probs):
            raise ValueError(
                f"model.num_classes {self.model.num_classes} != {len(self.data.class_probs)} dataset classes"
            )
        return self

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        """Load and validate a JSON run config."""
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        return cls.model_validate(raw)

    def with_overrides(self, **sections: dict[str, Any]) -> "RunConfig":
        """
        A re-validated copy with some fields replaced.

        Args:
            sections: section name -> {field: value}, e.g. train={"seed": 3}.
        """
        merged = self.model_dump(mode="json")
        for section, updates in sections.items():
            if section not in merged:
                raise ConfigError(f"unknown config section {section!r}")
            merged[section].update(updates)
        return type(self).model_validate(merged)

    def with_assignments(self, assignments: Sequence[str]) -> "RunConfig":
        """
        Apply command-line style overrides such as ``train.lr=1e-3`` or
        ``model.mode=baseline``. Values are read as JSON when they parse,
        otherwise as strings.
        """
        sections: dict[str, dict[str, Any]] = {}
        for text in assignments:
            section, key, value = parse_assignment(text)
            sections.setdefault(section, {})[key] = value
        return self.with_overrides(**sections) if sections else self

    def with_mode(self, mode: QueryMode | str) -> "RunConfig":
        return self.with_overrides(model={"mode": str(mode)}, train={"mode": str(mode)})

    @classmethod
    def json_schema(cls) -> dict:
        return cls.model_json_schema()
