from .annotations import SceneAnnotation, load_annotations, save_annotations
from .ppm import load_image, save_image
from .synthetic import (
    GLYPH_STYLES,
    SPLITS,
    DetectionSplit,
    SyntheticDataset,
    generate_dataset,
    generate_scene,
    generate_split,
    load_split,
    sample_labels,
    write_dataset,
)

__all__ = [
    "GLYPH_STYLES",
    "SPLITS",
    "DetectionSplit",
    "SceneAnnotation",
    "SyntheticDataset",
    "generate_dataset",
    "generate_scene",
    "generate_split",
    "load_annotations",
    "load_image",
    "load_split",
    "sample_labels",
    "save_annotations",
    "save_image",
    "write_dataset",
]
