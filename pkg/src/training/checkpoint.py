"""
Checkpoint file format.

    b"PAQD" | u32 version | u32 header length | header (UTF-8 JSON) | payload

All integers little-endian. The header holds the config, the epoch, the rng
state and one {name, shape, offset, count} entry per tensor; the payload is
the tensors as little-endian float32, concatenated in header order with
contiguous, non-overlapping offsets (in bytes, from the payload start).
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pydantic

from src.config import ModelConfig, RunConfig
from src.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from src.errors import CheckpointError
from src.model import Detector

logger = logging.getLogger(__name__)

_PREAMBLE = struct.Struct("<4sII")
_FLOAT = np.dtype("<f4")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    arrays: dict[str, np.ndarray]
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    run_config: RunConfig | None = None

    def build_detector(self, config: ModelConfig | None = None) -> Detector:
        """
        A detector holding these parameters.

        Args:
            config: build for this config instead of the stored one; the
                tensors must fit it (a baseline checkpoint has no pattern bank).
        """
        detector = Detector(config or self.model_config)
        detector.load_state_dict(self.arrays)
        return detector


def save_checkpoint(
    path: str | Path,
    detector: Detector,
    epoch: int = 0,
    rng_state: dict | None = None,
    run_config: RunConfig | None = None,
) -> Path:
    path = Path(path)
    tensors = []
    blobs = []
    offset = 0
    for name, array in detector.state_dict().items():
        blob = np.ascontiguousarray(array, dtype=_FLOAT).tobytes()
        tensors.append({"name": name, "shape": list(array.shape), "offset": offset, "count": array.size})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": (
            run_config.model_dump(mode="json")
            if run_config is not None
            else {"model": detector.config.model_dump(mode="json")}
        ),
        "epoch": epoch,
        "rng_state": rng_state or {},
        "tensors": tensors,
    }
    header_bytes = json.dumps(header).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(
        _PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)) + header_bytes + b"".join(blobs)
    )
    tmp.replace(path)
    logger.debug("wrote %s (%d tensors, %d payload bytes)", path, len(tensors), offset)
    return path


def _parse_header(raw: bytes, path: Path) -> tuple[dict, int]:
    if len(raw) < _PREAMBLE.size:
        raise CheckpointError(f"{path}: truncated before the header ({len(raw)} bytes)")
    magic, version, header_len = _PREAMBLE.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {CHECKPOINT_VERSION}")
    start = _PREAMBLE.size
    if len(raw) < start + header_len:
        raise CheckpointError(f"{path}: truncated inside the header")
    try:
        header = json.loads(raw[start : start + header_len])
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise CheckpointError(f"{path}: header is not valid JSON: {err}") from err
    for key in ("config", "tensors"):
        if key not in header:
            raise CheckpointError(f"{path}: header has no {key!r}")
    return header, start + header_len


def load_checkpoint(path: str | Path) -> Checkpoint:
    """
    Read and validate a checkpoint.

    Raises:
        CheckpointError: truncated file, bad magic, unknown version, malformed
            header, non-contiguous offsets or an invalid stored config.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    header, payload_start = _parse_header(raw, path)
    payload = memoryview(raw)[payload_start:]

    arrays: dict[str, np.ndarray] = {}
    expected_offset = 0
    for i, entry in enumerate(header["tensors"]):
        try:
            name = str(entry["name"])
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
        except (KeyError, TypeError, ValueError) as err:
            raise CheckpointError(f"{path}: tensors[{i}] is malformed: {err}") from err
        count = int(np.prod(shape, dtype=np.int64))
        if offset != expected_offset or entry.get("count", count) != count:
            raise CheckpointError(f"{path}: tensor {name!r} is not laid out contiguously")
        end = offset + count * _FLOAT.itemsize
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload in tensor {name!r}")
        arrays[name] = np.frombuffer(payload[offset:end], dtype=_FLOAT).reshape(shape).astype(np.float64)
        expected_offset = end
    if expected_offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - expected_offset} trailing payload bytes")

    try:
        model_config = ModelConfig.model_validate(header["config"]["model"])
        run_config = (
            RunConfig.model_validate(header["config"]) if set(header["config"]) != {"model"} else None
        )
    except (pydantic.ValidationError, KeyError, TypeError) as err:
        raise CheckpointError(f"{path}: stored config is invalid: {err}") from err
    return Checkpoint(
        model_config=model_config,
        arrays=arrays,
        epoch=int(header.get("epoch", 0)),
        rng_state=dict(header.get("rng_state", {})),
        run_config=run_config,
    )
