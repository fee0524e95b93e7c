"""Central finite-difference checks against the analytic gradients."""

from collections.abc import Callable, Mapping, Sequence
from typing import NamedTuple

import numpy as np

from src.autodiff.tensor import Tensor, backward
from src.errors import GraphError


class GradientProbe(NamedTuple):
    """One coordinate compared between backward and central differences."""

    tensor_name: str
    flat_index: int
    analytic: float
    numeric: float

    @property
    def relative_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(1.0, abs(self.analytic))


def _check_eps(eps: float) -> None:
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    eps: float = 1e-5,
) -> float:
    """
    Compare the gradient of a scalar function against central differences.

    Args:
        f: maps a tensor shaped like `x` to a scalar tensor. Must be smooth at `x`.
        x: the evaluation point. It is copied, never modified.
        eps: finite difference step.

    Returns:
        max over coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    _check_eps(eps)
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    probe = Tensor(base.copy(), requires_grad=True, name="x")
    out = f(probe)
    if out.size != 1:
        raise GraphError(f"finite_difference_check needs a scalar function, got shape {out.shape}")
    if out.requires_grad:
        backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        shifted = base.copy()
        shifted[idx] += eps
        f_plus = f(Tensor(shifted)).item()
        shifted[idx] -= 2.0 * eps
        f_minus = f(Tensor(shifted)).item()
        numeric[idx] = (f_plus - f_minus) / (2.0 * eps)

    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def probe_parameter_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    coordinates: Sequence[tuple[str, int]],
    eps: float = 1e-5,
) -> list[GradientProbe]:
    """
    Central differences on selected parameter coordinates.

    `params` must already hold the analytic gradients of `loss_fn()`.
    Each coordinate is perturbed in place and restored afterwards.
    """
    _check_eps(eps)
    probes: list[GradientProbe] = []
    for name, flat_index in coordinates:
        tensor = params[name]
        if tensor.grad is None:
            raise GraphError(f"parameter {name!r} has no gradient; run backward first")
        flat = tensor.data.reshape(-1)
        original = flat[flat_index]
        try:
            flat[flat_index] = original + eps
            f_plus = loss_fn().item()
            flat[flat_index] = original - eps
            f_minus = loss_fn().item()
        finally:
            flat[flat_index] = original
        probes.append(
            GradientProbe(
                tensor_name=name,
                flat_index=flat_index,
                analytic=float(tensor.grad.reshape(-1)[flat_index]),
                numeric=(f_plus - f_minus) / (2.0 * eps),
            )
        )
    return probes
