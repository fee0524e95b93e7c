"""Transformer building blocks expressed in autodiff primitives."""

import math
from collections.abc import Mapping

import numpy as np

from src.autodiff import Tensor
from src.autodiff import functional as F

Params = Mapping[str, Tensor]


def dense(x: Tensor, params: Params, name: str) -> Tensor:
    return F.linear(x, params[f"{name}.weight"], params[f"{name}.bias"])


def mlp(x: Tensor, params: Params, name: str) -> Tensor:
    """fc1 -> relu -> fc2."""
    return dense(F.relu(dense(x, params, f"{name}.fc1")), params, f"{name}.fc2")


def norm(x: Tensor, params: Params, name: str) -> Tensor:
    return F.layer_norm(x) * params[f"{name}.weight"] + params[f"{name}.bias"]


def multi_head_attention(
    query: Tensor,
    key: Tensor,
    value: Tensor,
    params: Params,
    name: str,
    num_heads: int,
) -> Tensor:
    """Scaled dot-product attention over `num_heads` column blocks."""
    q = dense(query, params, f"{name}.q")
    k = dense(key, params, f"{name}.k")
    v = dense(value, params, f"{name}.v")
    head_dim = q.shape[1] // num_heads
    scale = 1.0 / math.sqrt(head_dim)
    heads = []
    for h in range(num_heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        scores = (q[:, cols] @ k[:, cols].T) * scale
        heads.append(F.softmax(scores) @ v[:, cols])
    return dense(F.concat(heads, axis=1), params, f"{name}.o")


def inverse_sigmoid(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.log(np.maximum(x, eps) / np.maximum(1.0 - x, eps))
