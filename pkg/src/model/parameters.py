"""Parameter layout and initialization for the detector."""

import math
import zlib

import numpy as np

from src.autodiff import Tensor, parameter
from src.config import ModelConfig
from src.constants import QueryMode, RngStream
from src.rng import make_rng

# Focal-loss prior: initial foreground probability of every class logit.
_PRIOR_PROB = 0.01

PAQ_PREFIX = "query."


def _linear(shapes: dict[str, tuple[int, ...]], name: str, fan_in: int, fan_out: int) -> None:
    shapes[f"{name}.weight"] = (fan_in, fan_out)
    shapes[f"{name}.bias"] = (fan_out,)


def _norm(shapes: dict[str, tuple[int, ...]], name: str, dim: int) -> None:
    shapes[f"{name}.weight"] = (dim,)
    shapes[f"{name}.bias"] = (dim,)


def _attention(shapes: dict[str, tuple[int, ...]], name: str, dim: int) -> None:
    for proj in ("q", "k", "v", "o"):
        _linear(shapes, f"{name}.{proj}", dim, dim)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter tensor of a detector with `config`, in a fixed order."""
    d, c, f = config.embed_dim, config.num_classes, config.ffn_hidden
    shapes: dict[str, tuple[int, ...]] = {}

    _linear(shapes, "encoder.patch_embed", 3 * config.patch_size**2, d)
    shapes["encoder.pos_embed"] = (config.num_tokens, d)
    _attention(shapes, "encoder.attn", d)
    _norm(shapes, "encoder.norm1", d)
    _linear(shapes, "encoder.ffn.fc1", d, f)
    _linear(shapes, "encoder.ffn.fc2", f, d)
    _norm(shapes, "encoder.norm2", d)
    _linear(shapes, "encoder.score_head", d, c)

    _linear(shapes, "decoder.query_pos.fc1", 4, d)
    _linear(shapes, "decoder.query_pos.fc2", d, d)
    for layer in range(config.num_layers):
        prefix = f"decoder.layers.{layer}"
        _attention(shapes, f"{prefix}.self_attn", d)
        _norm(shapes, f"{prefix}.norm1", d)
        _attention(shapes, f"{prefix}.cross_attn", d)
        _norm(shapes, f"{prefix}.norm2", d)
        _linear(shapes, f"{prefix}.ffn.fc1", d, f)
        _linear(shapes, f"{prefix}.ffn.fc2", f, d)
        _norm(shapes, f"{prefix}.norm3", d)
        _linear(shapes, f"{prefix}.score_head", d, c)
        _linear(shapes, f"{prefix}.box_head.fc1", d, d)
        _linear(shapes, f"{prefix}.box_head.fc2", d, 4)

    if config.mode == QueryMode.PAQ:
        shapes[f"{PAQ_PREFIX}patterns"] = (config.num_patterns, d)
        _linear(shapes, f"{PAQ_PREFIX}wgen.fc1", d, config.wgen_hidden)
        _linear(shapes, f"{PAQ_PREFIX}wgen.fc2", config.wgen_hidden, config.num_patterns)
    return shapes


def _initial_value(name: str, shape: tuple[int, ...], config: ModelConfig) -> np.ndarray:
    # One stream per tensor name: baseline and paq share every common tensor.
    rng = make_rng(RngStream.PARAMS, config.seed, zlib.crc32(name.encode()))
    if name.endswith("patterns"):
        return rng.normal(0.0, config.pattern_init_std, size=shape)
    if name == "encoder.pos_embed":
        return rng.normal(0.0, 0.02, size=shape)
    if "norm" in name:
        return np.ones(shape) if name.endswith(".weight") else np.zeros(shape)
    if "score_head" in name and name.endswith(".bias"):
        return np.full(shape, -math.log((1 - _PRIOR_PROB) / _PRIOR_PROB))
    if "box_head.fc2" in name:
        # boxes start exactly at their reference
        return np.zeros(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    fan_in, fan_out = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_parameters(config: ModelConfig) -> dict[str, Tensor]:
    """Deterministically initialized parameters for `config`."""
    return {
        name: parameter(_initial_value(name, shape, config), name=name)
        for name, shape in parameter_shapes(config).items()
    }
