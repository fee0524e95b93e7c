"""AdamW with decoupled weight decay, global-norm clipping and the lr schedule."""

import math
from collections.abc import Iterable, Mapping

import numpy as np

from src.autodiff import Tensor


class AdamW:
    """
    Adam moments with bias correction; weight decay is applied to the
    parameters directly (scaled by lr), not folded into the gradient.
    Parameters without a gradient are left untouched.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 2e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        if lr < 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.exp_avg = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.exp_avg_sq = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.step_count += 1
        bias1 = 1.0 - self.beta1**self.step_count
        bias2 = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m = self.exp_avg[name]
            v = self.exp_avg_sq[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)


def global_grad_norm(params: Iterable[Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad**2)) for p in params if p.grad is not None))


def clip_gradients(params: Iterable[Tensor], max_norm: float) -> float:
    """
    Rescale all gradients together so their global L2 norm is at most `max_norm`.

    Returns:
        the norm before clipping.
    """
    params = [p for p in params if p.grad is not None]
    norm = global_grad_norm(params)
    if math.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad = p.grad * scale
    return norm


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base * 0.5 * (1 + cos(pi * t / T)) with T = total_steps - 1: lr(0) = base, lr(T) = 0."""
    span = max(total_steps - 1, 1)
    t = min(max(step, 0), span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / span))


def learning_rate(schedule: str, step: int, total_steps: int, base_lr: float) -> float:
    if schedule == "constant":
        return base_lr
    return cosine_lr(step, total_steps, base_lr)
