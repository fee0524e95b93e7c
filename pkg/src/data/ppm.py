"""Binary P6 PPM (8-bit) image I/O. Arrays are 3 x H x W floats in [0, 1]."""

import re
from pathlib import Path

import numpy as np

from src.errors import ImageFormatError

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)+(\d+)")


def to_bytes(image: np.ndarray) -> np.ndarray:
    """3 x H x W floats in [0, 1] -> H x W x 3 uint8."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ImageFormatError(f"expected a 3 x H x W image, got shape {image.shape}")
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def encode_ppm(image: np.ndarray) -> bytes:
    pixels = to_bytes(image)
    height, width, _ = pixels.shape
    return f"P6\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def decode_ppm(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if not raw.startswith(b"P6"):
        raise ImageFormatError(f"{source}: not a binary PPM (magic {raw[:2]!r}, expected b'P6')")
    pos = 2
    fields: list[int] = []
    for _ in range(3):
        found = _TOKEN.match(raw, pos)
        if not found:
            raise ImageFormatError(f"{source}: malformed PPM header")
        fields.append(int(found.group(1)))
        pos = found.end()
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{source}: only 8-bit PPM (maxval 255) is supported, got {maxval}")
    if pos >= len(raw) or raw[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise ImageFormatError(f"{source}: missing whitespace after PPM header")
    payload = raw[pos + 1 :]
    expected = width * height * 3
    if len(payload) != expected:
        raise ImageFormatError(
            f"{source}: header says {width}x{height} ({expected} bytes) but payload has {len(payload)}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def save_image(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def load_image(path: str | Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise ImageFormatError(f"cannot read image {path}: {err.strerror or err}") from err
    return decode_ppm(raw, source=str(path))
