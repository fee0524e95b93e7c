"""
Annotation file I/O.

File schema (boxes normalized cx/cy/w/h):

    {"images": [{"id", "file", "width", "height"}],
     "annotations": [{"image_id", "class_id", "bbox": [cx, cy, w, h]}],
     "categories": [{"id", "name"}]}
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import pydantic
from pydantic import BaseModel, ConfigDict

from src.constants import battery_classes
from src.errors import AnnotationFormatError
from src.matching import Box, GroundTruthSet


@dataclass
class SceneAnnotation:
    """Ground truth of one image."""

    image_id: int
    boxes: list[Box] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    file: str = ""
    width: int = 0
    height: int = 0

    def __post_init__(self) -> None:
        if len(self.boxes) != len(self.labels):
            raise ValueError(f"image {self.image_id}: {len(self.boxes)} boxes, {len(self.labels)} labels")

    def to_ground_truth(self) -> GroundTruthSet:
        return GroundTruthSet.from_boxes(self.boxes, self.labels)


class _Record(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=False)


class ImageRecord(_Record):
    id: int
    file: str
    width: int
    height: int


class AnnotationRecord(_Record):
    image_id: int
    class_id: int
    bbox: tuple[float, float, float, float]


class CategoryRecord(_Record):
    id: int
    name: str


class AnnotationFile(_Record):
    images: list[ImageRecord]
    annotations: list[AnnotationRecord]
    categories: list[CategoryRecord]


def default_categories() -> list[CategoryRecord]:
    return [CategoryRecord(id=c.class_id, name=c.name) for c in battery_classes]


def _location(loc: tuple) -> str:
    out = ""
    for part in loc:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out


def save_annotations(
    path: str | Path,
    scenes: list[SceneAnnotation],
    categories: list[CategoryRecord] | None = None,
) -> None:
    document = AnnotationFile(
        images=[
            ImageRecord(id=s.image_id, file=s.file, width=s.width, height=s.height) for s in scenes
        ],
        annotations=[
            AnnotationRecord(image_id=s.image_id, class_id=label, bbox=tuple(box))
            for s in scenes
            for box, label in zip(s.boxes, s.labels, strict=True)
        ],
        categories=categories if categories is not None else default_categories(),
    )
    Path(path).write_text(json.dumps(document.model_dump(mode="json"), indent=2))


def load_annotations(path: str | Path) -> list[SceneAnnotation]:
    """
    Read and validate an annotation file.

    Raises:
        AnnotationFormatError: malformed JSON, schema violations, unknown class
            or image ids and out-of-range boxes, naming the offending location.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as err:
        raise AnnotationFormatError(f"cannot read annotations {path}: {err.strerror or err}") from err
    except json.JSONDecodeError as err:
        raise AnnotationFormatError(f"{path}: invalid JSON at line {err.lineno} col {err.colno}") from err
    try:
        document = AnnotationFile.model_validate(raw)
    except pydantic.ValidationError as err:
        first = err.errors()[0]
        raise AnnotationFormatError(f"{path}: {_location(first['loc'])}: {first['msg']}") from err

    class_ids = {c.id for c in document.categories}
    scenes: dict[int, SceneAnnotation] = {}
    for i, image in enumerate(document.images):
        if image.id in scenes:
            raise AnnotationFormatError(f"{path}: images[{i}].id: duplicate image id {image.id}")
        scenes[image.id] = SceneAnnotation(
            image_id=image.id, file=image.file, width=image.width, height=image.height
        )
    for i, record in enumerate(document.annotations):
        where = f"{path}: annotations[{i}]"
        if record.image_id not in scenes:
            raise AnnotationFormatError(f"{where}.image_id: unknown image id {record.image_id}")
        if record.class_id not in class_ids:
            raise AnnotationFormatError(f"{where}.class_id: unknown class id {record.class_id}")
        box = Box(*record.bbox)
        try:
            box.validate_inside()
        except ValueError as err:
            raise AnnotationFormatError(f"{where}.bbox: {err}") from err
        scenes[record.image_id].boxes.append(box)
        scenes[record.image_id].labels.append(record.class_id)
    return list(scenes.values())
