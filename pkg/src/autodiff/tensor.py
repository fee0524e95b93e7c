"""
Reverse-mode differentiable tensors.

A `Tensor` wraps a float64 numpy array. Operations on tensors that require
gradients record the creating `Function` on the output, which makes the
compute graph implicit in the tensors themselves. `backward` recovers the
graph from the loss, walks it in reverse creation order and leaves a
gradient buffer on every tensor that requires one.
"""

import itertools
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np

from src.errors import GraphError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]

# Creation order doubles as a topological order: an output is always created
# after its inputs.
_node_counter = itertools.count()


class Function:
    """
    Base class for differentiable primitives.

    Subclasses implement `forward` on raw arrays and `backward`, which maps
    the gradient w.r.t. the output to one gradient per input (or None for
    inputs that do not need one).
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs: Any) -> "Tensor":
        """Run the primitive and record it on the output when any input requires grad."""
        tensors = tuple(as_tensor(x) for x in inputs)
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(out_data, requires_grad=requires_grad, creator=func if requires_grad else None)

    @property
    def name(self) -> str:
        return type(self).__name__


def unbroadcast(grad: np.ndarray, to_shape: tuple[int, ...]) -> np.ndarray:
    """Sum out the dimensions numpy broadcasting added so `grad` matches `to_shape`."""
    if grad.shape == to_shape:
        return grad
    while grad.ndim > len(to_shape):
        grad = grad.sum(axis=0)
    for dim, size in enumerate(to_shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


def broadcast_shape(op: str, *shapes: tuple[int, ...]) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"{op}: shapes {' and '.join(map(str, shapes))} do not broadcast") from None


class Tensor:
    """
    A float64 array with an optional gradient buffer.

    Leaves are tensors created directly (parameters, inputs); every other
    tensor carries the `Function` that produced it in `creator`.
    """

    # make `ndarray <op> Tensor` dispatch to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        creator: Function | None = None,
        name: str | None = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.creator = creator
        self.name = name
        self.grad: np.ndarray | None = None
        self.node_id: int = next(_node_counter)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # -- array-like accessors --

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat copy of the data."""
        return self.data.ravel().copy()

    @property
    def is_leaf(self) -> bool:
        return self.creator is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operators (the primitives live in functional.py) --

    def __add__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import functional as F

        return F.add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import functional as F

        return F.add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import functional as F

        return F.sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import functional as F

        return F.sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import functional as F

        return F.mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import functional as F

        return F.mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import functional as F

        return F.div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import functional as F

        return F.div(other, self)

    def __neg__(self) -> "Tensor":
        from src.autodiff import functional as F

        return F.neg(self)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import functional as F

        return F.matmul(self, other)

    def __rmatmul__(self, other: ArrayLike) -> "Tensor":
        from src.autodiff import functional as F

        return F.matmul(other, self)

    def __pow__(self, exponent: float) -> "Tensor":
        from src.autodiff import functional as F

        return F.power(self, exponent)

    def __getitem__(self, key: Any) -> "Tensor":
        from src.autodiff import functional as F

        return F.index(self, key)

    @property
    def T(self) -> "Tensor":
        from src.autodiff import functional as F

        return F.transpose(self)

    def reshape(self, *shape: int) -> "Tensor":
        from src.autodiff import functional as F

        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return F.reshape(self, shape)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        from src.autodiff import functional as F

        return F.tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        from src.autodiff import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x: ArrayLike) -> Tensor:
    """Wrap constants (numbers, arrays) as non-differentiable tensors."""
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data: ArrayLike, name: str | None = None) -> Tensor:
    """A leaf tensor that requires grad."""
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class ComputeGraph:
    """The recorded operations reachable from an output, in topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "ComputeGraph":
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            tensor = stack.pop()
            if tensor.node_id in seen or not tensor.requires_grad:
                continue
            seen[tensor.node_id] = tensor
            if tensor.creator is not None:
                stack.extend(tensor.creator.inputs)
        return cls(nodes=[seen[k] for k in sorted(seen)])

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.is_leaf]


def backward(loss: Tensor) -> ComputeGraph:
    """
    Populate `grad` on every tensor in the graph of `loss`.

    Contributions from a tensor feeding several consumers are summed within
    this pass. A second pass over leaves that still hold gradients is
    rejected: clear them with `zero_grad` first.

    Returns:
        The traced graph, for callers that want to inspect it.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward called on a tensor with no recorded graph")

    graph = ComputeGraph.trace(loss)
    stale = [t.name or f"node {t.node_id}" for t in graph.nodes if t.grad is not None]
    if stale:
        raise GraphError(
            f"gradients already populated on {len(stale)} tensor(s) (first: {stale[0]}); "
            "call zero_grad before a second backward"
        )

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for tensor in reversed(graph.nodes):
        grad = grads.pop(tensor.node_id, None)
        if grad is None:
            grad = np.zeros_like(tensor.data)
        tensor.grad = grad
        if tensor.creator is None:
            continue
        input_grads = tensor.creator.backward(grad)
        for inp, inp_grad in zip(tensor.creator.inputs, input_grads, strict=True):
            if inp_grad is None or not inp.requires_grad:
                continue
            if inp.node_id in grads:
                grads[inp.node_id] = grads[inp.node_id] + inp_grad
            else:
                grads[inp.node_id] = inp_grad

    logger.debug("backward visited %d nodes", len(graph))
    return graph


def zero_grad(tensors: Sequence[Tensor] | Any) -> None:
    """Clear the gradient buffers of `tensors` (any iterable of tensors)."""
    for t in tensors:
        t.zero_grad()
