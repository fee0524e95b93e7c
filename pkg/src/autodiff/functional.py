"""
Differentiable primitives.

Every primitive validates its operand shapes, computes its forward pass in
float64 numpy and knows its own vector-Jacobian product. Slicing and
gathering copy; no output aliases an input buffer.
"""

from collections.abc import Sequence
from typing import Any

import numpy as np

from src.autodiff.tensor import ArrayLike, Function, Tensor, broadcast_shape, unbroadcast
from src.errors import ShapeError

# -- elementwise binary --


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        broadcast_shape("add", a.shape, b.shape)
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        broadcast_shape("sub", a.shape, b.shape)
        return a - b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        broadcast_shape("mul", a.shape, b.shape)
        return a * b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.inputs
        return unbroadcast(grad * b.data, a.shape), unbroadcast(grad * a.data, b.shape)


class Div(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        broadcast_shape("div", a.shape, b.shape)
        return a / b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.inputs
        return (
            unbroadcast(grad / b.data, a.shape),
            unbroadcast(-grad * a.data / (b.data * b.data), b.shape),
        )


class Maximum(Function):
    """Elementwise max; on ties the gradient goes to the first operand."""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        broadcast_shape("maximum", a.shape, b.shape)
        self.pick_a = a >= b
        return np.where(self.pick_a, a, b)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.inputs
        return (
            unbroadcast(np.where(self.pick_a, grad, 0.0), a.shape),
            unbroadcast(np.where(self.pick_a, 0.0, grad), b.shape),
        )


class Minimum(Function):
    """Elementwise min; on ties the gradient goes to the first operand."""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        broadcast_shape("minimum", a.shape, b.shape)
        self.pick_a = a <= b
        return np.where(self.pick_a, a, b)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.inputs
        return (
            unbroadcast(np.where(self.pick_a, grad, 0.0), a.shape),
            unbroadcast(np.where(self.pick_a, 0.0, grad), b.shape),
        )


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
        return a @ b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.inputs
        return grad @ b.data.T, a.data.T @ grad


# -- elementwise unary --


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (-grad,)


class Power(Function):
    def forward(self, a: np.ndarray, exponent: float) -> np.ndarray:
        self.exponent = float(exponent)
        return a**self.exponent

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        (a,) = self.inputs
        if self.exponent == 0.0:
            return (np.zeros_like(grad),)
        return (grad * self.exponent * a.data ** (self.exponent - 1.0),)


class Exp(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.out = np.exp(a)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.out,)


class Log(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return np.log(a)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        (a,) = self.inputs
        return (grad / a.data,)


class Abs(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return np.abs(a)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        (a,) = self.inputs
        return (grad * np.sign(a.data),)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.out = _stable_sigmoid(a)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.out * (1.0 - self.out),)


class Softplus(Function):
    """log(1 + exp(x)), evaluated without overflow."""

    def forward(self, a: np.ndarray) -> np.ndarray:
        return np.logaddexp(0.0, a)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        (a,) = self.inputs
        return (grad * _stable_sigmoid(a.data),)


class Relu(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.where(self.mask, grad, 0.0),)


# -- row-wise --


class Softmax(Function):
    """Softmax over the last axis."""

    def forward(self, a: np.ndarray) -> np.ndarray:
        shifted = a - a.max(axis=-1, keepdims=True)
        ex = np.exp(shifted)
        self.out = ex / ex.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        s = self.out
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)


class LayerNorm(Function):
    """Normalize the last axis to zero mean, unit variance (no affine part)."""

    def forward(self, a: np.ndarray, eps: float = 1e-5) -> np.ndarray:
        mu = a.mean(axis=-1, keepdims=True)
        centered = a - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.out = centered * self.inv_std
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        x_hat = self.out
        g_mean = grad.mean(axis=-1, keepdims=True)
        gx_mean = (grad * x_hat).mean(axis=-1, keepdims=True)
        return (self.inv_std * (grad - g_mean - x_hat * gx_mean),)


# -- reductions and structure --


class Sum(Function):
    def forward(self, a: np.ndarray, axis: int | None = None, keepdims: bool = False) -> np.ndarray:
        self.axis, self.keepdims = axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        (a,) = self.inputs
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, a.shape).copy(),)


class Index(Function):
    """Basic or advanced indexing; the result is always a copy."""

    def forward(self, a: np.ndarray, key: Any) -> np.ndarray:
        self.key = key
        try:
            return np.array(a[key], dtype=np.float64, copy=True)
        except IndexError as err:
            raise ShapeError(f"index {key!r} invalid for shape {a.shape}: {err}") from None

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        (a,) = self.inputs
        full = np.zeros_like(a.data)
        np.add.at(full, self.key, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int = 0) -> np.ndarray:
        ndim = arrays[0].ndim
        if any(arr.ndim != ndim for arr in arrays) or not -ndim <= axis < ndim:
            raise ShapeError(f"concat along axis {axis}: shapes {[x.shape for x in arrays]}")
        axis %= ndim
        self.axis = axis
        others = {arr.shape[:axis] + arr.shape[axis + 1 :] for arr in arrays}
        if len(others) != 1:
            raise ShapeError(
                f"concat along axis {axis}: shapes {[x.shape for x in arrays]} disagree"
            )
        self.splits = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(part.copy() for part in np.split(grad, self.splits, axis=self.axis))


class Reshape(Function):
    def forward(self, a: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
        try:
            return a.reshape(shape).copy()
        except ValueError:
            raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}") from None

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        (a,) = self.inputs
        return (grad.reshape(a.shape),)


class Transpose(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        if a.ndim != 2:
            raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")
        return a.T.copy()

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.T.copy(),)


# -- functional API --


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Add.apply(a, b)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Sub.apply(a, b)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Mul.apply(a, b)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Div.apply(a, b)


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Maximum.apply(a, b)


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    return Minimum.apply(a, b)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return MatMul.apply(a, b)


def neg(a: ArrayLike) -> Tensor:
    return Neg.apply(a)


def power(a: ArrayLike, exponent: float) -> Tensor:
    return Power.apply(a, exponent=exponent)


def exp(a: ArrayLike) -> Tensor:
    return Exp.apply(a)


def log(a: ArrayLike) -> Tensor:
    return Log.apply(a)


def abs(a: ArrayLike) -> Tensor:  # noqa: A001
    return Abs.apply(a)


def sigmoid(a: ArrayLike) -> Tensor:
    return Sigmoid.apply(a)


def softplus(a: ArrayLike) -> Tensor:
    return Softplus.apply(a)


def relu(a: ArrayLike) -> Tensor:
    return Relu.apply(a)


def softmax(a: ArrayLike) -> Tensor:
    return Softmax.apply(a)


def layer_norm(a: ArrayLike, eps: float = 1e-5) -> Tensor:
    return LayerNorm.apply(a, eps=eps)


def tensor_sum(a: ArrayLike, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: ArrayLike, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def index(a: ArrayLike, key: Any) -> Tensor:
    return Index.apply(a, key=key)


def gather_rows(a: ArrayLike, rows: Sequence[int] | np.ndarray) -> Tensor:
    return Index.apply(a, key=np.asarray(rows, dtype=np.intp))


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    return Concat.apply(*tensors, axis=axis)


def reshape(a: ArrayLike, shape: tuple[int, ...]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: ArrayLike) -> Tensor:
    return Transpose.apply(a)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias broadcast over rows)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)
