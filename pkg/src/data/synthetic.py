"""
Synthetic long-tailed detection scenes.

Each class renders a parametric glyph with its own shape and color family
plus per-instance jitter in hue, scale and aspect. Dry cells and toy
batteries share the cylinder shape and differ only in aspect, tint and
texture, which keeps them confusable at 64 x 64.
"""

import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from src.config import DatasetConfig
from src.constants import NUM_CLASSES, RngStream
from src.data.annotations import SceneAnnotation, load_annotations, save_annotations
from src.data.ppm import load_image, save_image
from src.errors import DatasetError
from src.matching import Box, pairwise_iou
from src.rng import make_rng

logger = logging.getLogger(__name__)

SPLITS: tuple[str, ...] = ("train", "val", "test")


class GlyphStyle(NamedTuple):
    shape: str
    size_range: tuple[float, float]  # long side, normalized
    aspect_range: tuple[float, float]  # w / h
    color: tuple[float, float, float]
    texture: str = "plain"


GLYPH_STYLES: tuple[GlyphStyle, ...] = (
    GlyphStyle("rectangle", (0.28, 0.40), (1.4, 1.8), (0.22, 0.22, 0.26), "terminals"),
    GlyphStyle("triangle", (0.22, 0.32), (0.9, 1.1), (0.20, 0.62, 0.30)),
    GlyphStyle("cylinder", (0.16, 0.24), (0.35, 0.45), (0.86, 0.56, 0.16), "cap"),
    GlyphStyle("ellipse", (0.22, 0.32), (1.6, 2.0), (0.34, 0.44, 0.70)),
    GlyphStyle("rectangle", (0.10, 0.16), (0.9, 1.1), (0.76, 0.76, 0.82)),
    GlyphStyle("cylinder", (0.13, 0.19), (0.50, 0.65), (0.80, 0.48, 0.22), "stripes"),
)


@dataclass
class DetectionSplit:
    name: str
    images: list[np.ndarray] = field(default_factory=list)
    annotations: list[SceneAnnotation] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.annotations)


@dataclass
class SyntheticDataset:
    splits: dict[str, DetectionSplit]

    def __getitem__(self, split: str) -> DetectionSplit:
        return self.splits[split]

    def class_counts(self, split: str) -> np.ndarray:
        counts = np.zeros(NUM_CLASSES, dtype=int)
        for scene in self.splits[split].annotations:
            np.add.at(counts, np.asarray(scene.labels, dtype=int), 1)
        return counts


def sample_labels(rng: np.random.Generator, class_probs: tuple[float, ...], n: int) -> np.ndarray:
    return rng.choice(len(class_probs), size=n, p=np.asarray(class_probs))


def _sample_box(rng: np.random.Generator, style: GlyphStyle) -> Box:
    long_side = rng.uniform(*style.size_range)
    aspect = rng.uniform(*style.aspect_range)
    if aspect >= 1.0:
        w, h = long_side, long_side / aspect
    else:
        w, h = long_side * aspect, long_side
    w, h = min(w, 1.0), min(h, 1.0)
    cx = rng.uniform(w / 2, 1.0 - w / 2)
    cy = rng.uniform(h / 2, 1.0 - h / 2)
    return Box(float(cx), float(cy), float(w), float(h))


def _glyph_mask(shape: str, u: np.ndarray, v: np.ndarray, aspect: float) -> np.ndarray:
    """`u`, `v` are pixel offsets in box half-extent units."""
    inside = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    if shape == "rectangle":
        return inside
    if shape == "ellipse":
        return u * u + v * v <= 1.0
    if shape == "triangle":
        return inside & (np.abs(u) <= (v + 1.0) / 2.0)
    if shape == "cylinder":
        cap = min(aspect, 1.0)
        body = np.abs(v) <= 1.0 - cap
        ends = u * u + ((np.abs(v) - (1.0 - cap)) / cap) ** 2 <= 1.0
        return inside & (body | ends)
    raise ValueError(f"unknown glyph shape {shape!r}")


def render_glyph(
    image: np.ndarray, box: Box, label: int, rng: np.random.Generator
) -> None:
    """Paint one object into `image` (3 x S x S) in place."""
    style = GLYPH_STYLES[label]
    side = image.shape[1]
    centers = (np.arange(side) + 0.5) / side
    u = (centers[None, :] - box.cx) / (box.w / 2)
    v = (centers[:, None] - box.cy) / (box.h / 2)
    u, v = np.broadcast_arrays(u, v)
    mask = _glyph_mask(style.shape, u, v, box.w / box.h)

    tint = np.clip(np.asarray(style.color) * rng.uniform(0.85, 1.15, size=3), 0.0, 1.0)
    shade = np.ones_like(u)
    if style.texture == "cap":
        shade = np.where(v < -0.7, 1.35, 1.0)
    elif style.texture == "stripes":
        shade = np.where(np.floor((v + 1.0) * 3.0) % 2 == 1, 0.7, 1.0)
    elif style.texture == "terminals":
        shade = np.where((v < -0.75) & (np.abs(np.abs(u) - 0.6) < 0.15), 2.5, 1.0)
    for channel in range(3):
        image[channel][mask] = np.clip(tint[channel] * shade[mask], 0.0, 1.0)


def generate_scene(
    cfg: DatasetConfig, split_index: int, image_id: int
) -> tuple[np.ndarray, SceneAnnotation]:
    """One image and its annotation, from the stream (seed, split, image_id)."""
    rng = make_rng(RngStream.SCENE, cfg.seed, split_index, image_id)
    side = cfg.image_size
    background = rng.uniform(0.35, 0.6)
    image = np.clip(background + rng.normal(0.0, 0.03, size=(3, side, side)), 0.0, 1.0)

    n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    labels = sample_labels(rng, cfg.class_probs, n_objects)
    boxes: list[Box] = []
    kept: list[int] = []
    for label in labels:
        style = GLYPH_STYLES[int(label)]
        for _ in range(cfg.max_placement_attempts):
            candidate = _sample_box(rng, style)
            if not boxes or pairwise_iou(np.array([candidate]), np.array(boxes)).max() <= cfg.overlap_allowance:
                boxes.append(candidate)
                kept.append(int(label))
                render_glyph(image, candidate, int(label), rng)
                break
        else:
            logger.debug("image %d: dropped a class-%d object after %d placements",
                         image_id, label, cfg.max_placement_attempts)

    # quantize so saved and in-memory pixels agree exactly
    image = np.rint(image * 255.0) / 255.0
    scene = SceneAnnotation(
        image_id=image_id,
        boxes=boxes,
        labels=kept,
        file=f"images/{image_id:05d}.ppm",
        width=side,
        height=side,
    )
    return image, scene


def generate_split(cfg: DatasetConfig, split: str) -> DetectionSplit:
    split_index = SPLITS.index(split)
    out = DetectionSplit(name=split)
    for image_id in range(cfg.split_sizes[split]):
        image, scene = generate_scene(cfg, split_index, image_id)
        out.images.append(image)
        out.annotations.append(scene)
    return out


def generate_dataset(cfg: DatasetConfig) -> SyntheticDataset:
    dataset = SyntheticDataset(splits={split: generate_split(cfg, split) for split in SPLITS})
    logger.info(
        "generated %s images",
        ", ".join(f"{len(s)} {name}" for name, s in dataset.splits.items()),
    )
    return dataset


def write_dataset(dataset: SyntheticDataset, out_dir: str | Path, force: bool = False) -> Path:
    """Write {split}/images/*.ppm and {split}/annotations.json under `out_dir`."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        if not force:
            raise DatasetError(f"{out_dir} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out_dir)
    for name, split in dataset.splits.items():
        image_dir = out_dir / name / "images"
        image_dir.mkdir(parents=True, exist_ok=True)
        for image, scene in zip(split.images, split.annotations, strict=True):
            save_image(out_dir / name / scene.file, image)
        save_annotations(out_dir / name / "annotations.json", split.annotations)
    return out_dir


def load_split(split_dir: str | Path) -> DetectionSplit:
    split_dir = Path(split_dir)
    ann_path = split_dir / "annotations.json"
    if not ann_path.is_file():
        raise DatasetError(f"no annotations.json in {split_dir}")
    scenes = load_annotations(ann_path)
    if not scenes:
        raise DatasetError(f"split {split_dir} has no images")
    images = [load_image(split_dir / scene.file) for scene in scenes]
    return DetectionSplit(name=split_dir.name, images=images, annotations=scenes)
