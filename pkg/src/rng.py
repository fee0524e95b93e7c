"""
The single seeded random source.

Every stream is a Philox (counter-based) generator keyed by a purpose
(``RngStream``) and a tuple of non-negative integers, e.g.
``(SCENE, seed, split, image_id)`` or ``(EPOCH_ORDER, seed, epoch)``, so
streams are reproducible across processes and platforms.
"""

import numpy as np

from src.constants import RngStream

RNG_NAME = "philox"


def stream_entropy(stream: RngStream, *keys: int) -> list[int]:
    """
    The SeedSequence entropy of a stream. The key count is part of it, since
    SeedSequence pads with zeros and would otherwise equate ``(0, 1)`` with
    ``(0, 1, 0)``.
    """
    if any(k < 0 for k in keys):
        raise ValueError(f"rng keys must be non-negative, got {keys}")
    return [int(RngStream(stream)), len(keys), *keys]


def make_rng(stream: RngStream, *keys: int) -> np.random.Generator:
    """
    Build a generator for one stream.

    Args:
        stream: what the numbers are for.
        keys: non-negative integers naming the stream, most significant first.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(stream_entropy(stream, *keys))))
