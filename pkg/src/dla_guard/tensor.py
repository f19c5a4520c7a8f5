"""Reverse-mode automatic differentiation over numpy arrays.

This module provides the small autograd engine every other part of dla-guard is built on.
A `Tensor` wraps a numpy array; each differentiable operation is a `Function` subclass that
records its inputs on a tape when any input requires a gradient. Calling `Tensor.backward()`
walks the tape once in reverse topological order and accumulates gradients into the leaf
tensors that requested them.

Only the operations needed by the dense/conv/pool/relu classifiers and by the gradient-based
attacks are implemented. Convolution is valid-padding with stride 1.

Example:
    ```python
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    w = Tensor(np.ones((3, 4)))
    loss = relu(matmul(x, w)).sum()
    loss.backward()
    x.grad  # array of 4.0
    ```
"""

from __future__ import annotations

from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DimensionError, InputError, NumericError

Array = npt.NDArray[Any]
""" Any numpy array handled by the engine """

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Function:
    """A recorded operation on the tape.

    Subclasses implement `forward` over raw arrays and `backward`, which maps the gradient of
    the output to one gradient per input (or None when an input needs none).
    """

    def __init__(self, *parents: Tensor) -> None:
        self.parents = parents

    def forward(self, *arrays: Array, **kwargs: Any) -> Array:
        raise NotImplementedError

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        raise NotImplementedError

    def needs_grad(self, index: int) -> bool:
        """True if the input at `index` takes part in the backward pass."""
        return self.parents[index].requires_grad

    @classmethod
    def apply(cls, *tensors: Tensor, **kwargs: Any) -> Tensor:
        """Run the forward pass and record the operation if any input requires a gradient."""
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        if not np.all(np.isfinite(out)):
            error_msg = f"{cls.__name__} produced non-finite values"
            raise NumericError(error_msg)
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, _ctx=func if requires_grad else None)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum out the dimensions numpy broadcasting added to reach `grad.shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An n-dimensional array that can take part in reverse-mode differentiation.

    Attributes:
        data: Contiguous float32 (default) or float64 values in row-major order
        requires_grad: Whether gradients flow to this tensor
        grad: Accumulated gradient for leaf tensors, same shape as `data`
    """

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: npt.DTypeLike | None = None,
        _ctx: Function | None = None,
    ) -> None:
        array = np.asarray(data)
        if dtype is None:
            dtype = array.dtype if array.dtype in _FLOAT_DTYPES else DEFAULT_DTYPE
        self.data: Array = np.ascontiguousarray(array, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Array | None = None
        self._ctx = _ctx

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def dtype(self) -> np.dtype[Any]:
        return self.data.dtype

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _lift(self, other: Tensor | float) -> Tensor:
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other: Tensor | float) -> Tensor:
        return Add.apply(self, self._lift(other))

    def __radd__(self, other: float) -> Tensor:
        return Add.apply(self._lift(other), self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other: float) -> Tensor:
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other: float) -> Tensor:
        return Mul.apply(self._lift(other), self)

    def __neg__(self) -> Tensor:
        return Neg.apply(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return MatMul.apply(self, other)

    def sum(self, axis: int | None = None) -> Tensor:
        return Sum.apply(self, axis=axis)

    def mean(self) -> Tensor:
        return Mean.apply(self)

    def reshape(self, *shape: int) -> Tensor:
        return Reshape.apply(self, shape=shape)

    def flatten(self) -> Tensor:
        """Collapse every axis but the first (batch) one."""
        return Reshape.apply(self, shape=(self.shape[0], -1))

    def backward(self, grad: Array | None = None) -> None:
        """Propagate gradients from this tensor to every leaf that requires them.

        Args:
            grad: Gradient of the final objective with respect to this tensor. May be omitted
                for single-element tensors, where it defaults to one.

        Raises:
            InputError: If this tensor does not require gradients, or `grad` is missing for a
                tensor with more than one element
        """
        if not self.requires_grad:
            error_msg = "backward() called on a tensor that does not require gradients"
            raise InputError(error_msg)
        if grad is None:
            if self.data.size != 1:
                error_msg = f"backward() on a tensor of shape {self.shape} needs an explicit gradient"
                raise InputError(error_msg)
            grad = np.ones_like(self.data)
        elif grad.shape != self.data.shape:
            error_msg = f"gradient shape {grad.shape} does not match tensor shape {self.shape}"
            raise DimensionError(error_msg)

        pending: dict[int, Array] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(self._topological_order()):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._ctx is None:
                node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(node._ctx.parents, node._ctx.backward(node_grad), strict=True):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    def _topological_order(self) -> list[Tensor]:
        """Nodes reachable from this tensor, every node after all of its inputs."""
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                stack.extend((parent, False) for parent in node._ctx.parents if parent.requires_grad)
        return order


class Add(Function):
    def forward(self, a: Array, b: Array) -> Array:  # type: ignore[override]
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a: Array, b: Array) -> Array:  # type: ignore[override]
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a: Array, b: Array) -> Array:  # type: ignore[override]
        self.a, self.b = a, b
        return a * b

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Neg(Function):
    def forward(self, a: Array) -> Array:  # type: ignore[override]
        return -a

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return (-grad,)


class MatMul(Function):
    """C = A·B for 2-d operands; dA = dC·Bᵀ and dB = Aᵀ·dC."""

    def forward(self, a: Array, b: Array) -> Array:  # type: ignore[override]
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            error_msg = f"matmul shape mismatch: {a.shape} x {b.shape}"
            raise DimensionError(error_msg)
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        grad_a = grad @ self.b.T if self.needs_grad(0) else None
        grad_b = self.a.T @ grad if self.needs_grad(1) else None
        return grad_a, grad_b


class Sum(Function):
    def forward(self, a: Array, axis: int | None = None) -> Array:  # type: ignore[override]
        self.shape, self.axis = a.shape, axis
        return np.asarray(a.sum(axis=axis), dtype=a.dtype)

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        if self.axis is not None:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, a: Array) -> Array:  # type: ignore[override]
        if a.size == 0:
            error_msg = "mean of an empty tensor"
            raise InputError(error_msg)
        self.shape = a.shape
        return np.asarray(a.mean(), dtype=a.dtype)

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        count = int(np.prod(self.shape))
        return (np.full(self.shape, grad / count, dtype=grad.dtype),)


class Reshape(Function):
    def forward(self, a: Array, shape: tuple[int, ...]) -> Array:  # type: ignore[override]
        self.shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as err:
            error_msg = f"cannot reshape {a.shape} into {shape}"
            raise DimensionError(error_msg) from err

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return (grad.reshape(self.shape),)


class Concat(Function):
    def forward(self, *arrays: Array, axis: int = 1) -> Array:  # type: ignore[override]
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class Tanh(Function):
    def forward(self, a: Array) -> Array:  # type: ignore[override]
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return (grad * (1 - self.out * self.out),)


class ReLU(Function):
    """max(0, x) with subgradient 0 at exactly 0."""

    def forward(self, a: Array) -> Array:  # type: ignore[override]
        self.mask = a > 0
        return np.where(self.mask, a, a.dtype.type(0))

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return (grad * self.mask,)


class ClampMin(Function):
    """max(x, floor); the hinge used by the margin losses."""

    def forward(self, a: Array, floor: float = 0.0) -> Array:  # type: ignore[override]
        self.mask = a > floor
        return np.maximum(a, a.dtype.type(floor))

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return (grad * self.mask,)


class Pick(Function):
    """Select one element per row: out[i] = x[i, index[i]]."""

    def forward(self, a: Array, index: Array) -> Array:  # type: ignore[override]
        if a.ndim != 2 or index.shape != (a.shape[0],):
            error_msg = f"pick needs a 2-d tensor and one index per row, got {a.shape} and {index.shape}"
            raise DimensionError(error_msg)
        self.shape, self.index = a.shape, index
        return a[np.arange(a.shape[0]), index]

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        out = np.zeros(self.shape, dtype=grad.dtype)
        out[np.arange(self.shape[0]), self.index] = grad
        return (out,)


class RowMax(Function):
    """Row-wise maximum; the gradient goes to the first maximal element."""

    def forward(self, a: Array) -> Array:  # type: ignore[override]
        self.shape = a.shape
        self.index = a.argmax(axis=1)
        return a[np.arange(a.shape[0]), self.index]

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        out = np.zeros(self.shape, dtype=grad.dtype)
        out[np.arange(self.shape[0]), self.index] = grad
        return (out,)


class Conv2d(Function):
    """Valid, stride-1 2-d convolution computed as a matrix product over unfolded windows."""

    def forward(self, x: Array, kernels: Array, bias: Array) -> Array:  # type: ignore[override]
        if x.ndim != 4 or kernels.ndim != 4 or bias.ndim != 1:
            error_msg = f"conv2d expects N×C×H×W input and F×C×k×k kernels, got {x.shape} and {kernels.shape}"
            raise DimensionError(error_msg)
        n, channels, height, width = x.shape
        filters, kernel_channels, kh, kw = kernels.shape
        if kernel_channels != channels or bias.shape[0] != filters or kh != kw:
            error_msg = f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}, bias {bias.shape}"
            raise DimensionError(error_msg)
        if kh > height or kw > width:
            error_msg = f"conv2d kernel {kh}×{kw} is larger than the input {height}×{width}"
            raise DimensionError(error_msg)
        oh, ow = height - kh + 1, width - kw + 1
        windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
        self.cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, channels * kh * kw)
        self.flat_kernels = kernels.reshape(filters, -1)
        self.x_shape, self.k_shape, self.out_hw = x.shape, kernels.shape, (oh, ow)
        out = self.cols @ self.flat_kernels.T + bias
        return np.ascontiguousarray(out.reshape(n, oh, ow, filters).transpose(0, 3, 1, 2))

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        n, channels, _, _ = self.x_shape
        filters, _, kh, kw = self.k_shape
        oh, ow = self.out_hw
        grad_rows = grad.transpose(0, 2, 3, 1).reshape(-1, filters)
        grad_kernels = (grad_rows.T @ self.cols).reshape(self.k_shape) if self.needs_grad(1) else None
        grad_bias = grad_rows.sum(axis=0) if self.needs_grad(2) else None
        grad_x = None
        if self.needs_grad(0):
            grad_cols = (grad_rows @ self.flat_kernels).reshape(n, oh, ow, channels, kh, kw)
            grad_x = np.zeros(self.x_shape, dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    grad_x[:, :, i : i + oh, j : j + ow] += grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return grad_x, grad_kernels, grad_bias


class MaxPool2d(Function):
    """Non-overlapping max pooling; ties route the gradient to the first element in row-major order."""

    def forward(self, x: Array, size: int = 2) -> Array:  # type: ignore[override]
        if size < 1:
            error_msg = f"pool size must be positive, got {size}"
            raise InputError(error_msg)
        if x.ndim != 4:
            error_msg = f"maxpool2d expects N×C×H×W input, got {x.shape}"
            raise DimensionError(error_msg)
        n, channels, height, width = x.shape
        if height % size or width % size:
            error_msg = f"maxpool2d input {height}×{width} is not divisible by {size}"
            raise DimensionError(error_msg)
        oh, ow = height // size, width // size
        blocks = x.reshape(n, channels, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, channels, oh, ow, size * size)
        self.index = blocks.argmax(axis=-1)[..., None]
        self.x_shape, self.size = x.shape, size
        return np.take_along_axis(blocks, self.index, axis=-1)[..., 0]

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        n, channels, height, width = self.x_shape
        size = self.size
        oh, ow = height // size, width // size
        blocks = np.zeros((n, channels, oh, ow, size * size), dtype=grad.dtype)
        np.put_along_axis(blocks, self.index, grad[..., None], axis=-1)
        grad_x = blocks.reshape(n, channels, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (grad_x.reshape(self.x_shape),)


class Softmax(Function):
    """Row-wise softmax; dx = p · (g − Σ g·p)."""

    def forward(self, a: Array) -> Array:  # type: ignore[override]
        exp = np.exp(a - a.max(axis=1, keepdims=True))
        self.out = exp / exp.sum(axis=1, keepdims=True)
        return self.out

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        return (self.out * (grad - (grad * self.out).sum(axis=1, keepdims=True)),)


class SoftmaxCrossEntropy(Function):
    """Cross-entropy of softmax(logits) against class indices, with the max-shift trick."""

    def forward(self, logits: Array, labels: Array, reduction: str = "mean") -> Array:  # type: ignore[override]
        if logits.ndim != 2:
            error_msg = f"softmax_cross_entropy expects N×C logits, got {logits.shape}"
            raise DimensionError(error_msg)
        n, classes = logits.shape
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            error_msg = f"expected {n} labels, got shape {labels.shape}"
            raise InputError(error_msg)
        if n == 0:
            error_msg = "softmax_cross_entropy on an empty batch"
            raise InputError(error_msg)
        if labels.min() < 0 or labels.max() >= classes:
            error_msg = f"labels must lie in [0, {classes})"
            raise InputError(error_msg)
        if reduction not in ("mean", "sum"):
            error_msg = f"unknown reduction {reduction!r}"
            raise InputError(error_msg)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.probs = np.exp(log_probs)
        self.labels = labels
        self.scale = 1.0 / n if reduction == "mean" else 1.0
        return np.asarray(-log_probs[np.arange(n), labels].sum() * self.scale, dtype=logits.dtype)

    def backward(self, grad: Array) -> tuple[Array | None, ...]:
        delta = self.probs.copy()
        delta[np.arange(delta.shape[0]), self.labels] -= 1
        return (delta * (grad * self.scale),)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    return Conv2d.apply(x, kernels, bias)


def maxpool2d(x: Tensor, size: int) -> Tensor:
    return MaxPool2d.apply(x, size=size)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    return ClampMin.apply(x, floor=floor)


def pick(x: Tensor, index: Array) -> Tensor:
    return Pick.apply(x, index=np.asarray(index, dtype=np.int64))


def row_max(x: Tensor) -> Tensor:
    return RowMax.apply(x)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def softmax_rows(x: Tensor) -> Tensor:
    return Softmax.apply(x)


def softmax_cross_entropy(logits: Tensor, labels: Array, reduction: str = "mean") -> Tensor:
    """Mean (or summed) cross-entropy loss; the backward pass yields (softmax − onehot)/N."""
    return SoftmaxCrossEntropy.apply(logits, labels=labels, reduction=reduction)


def softmax(logits: Array) -> Array:
    """Row-wise softmax of a plain array, computed in float64."""
    shifted = np.asarray(logits, dtype=np.float64)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)  # type: ignore[no-any-return]


class DifferentiableModel(Protocol):
    """Anything `input_gradient` can differentiate through."""

    @property
    def class_count(self) -> int: ...

    @property
    def dtype(self) -> np.dtype[Any]: ...

    def forward(self, x: Tensor) -> Tensor: ...


class LossSpec(Protocol):
    """A scalar objective over model outputs."""

    def validate(self, class_count: int) -> None: ...

    def __call__(self, outputs: Tensor) -> Tensor: ...


@dataclass(frozen=True)
class CrossEntropyLoss:
    """Softmax cross-entropy against class labels."""

    labels: Array
    reduction: str = "mean"

    def validate(self, class_count: int) -> None:
        labels = np.asarray(self.labels)
        if labels.size and (labels.min() < 0 or labels.max() >= class_count):
            error_msg = f"loss references a class outside [0, {class_count})"
            raise InputError(error_msg)

    def __call__(self, outputs: Tensor) -> Tensor:
        return softmax_cross_entropy(outputs, self.labels, self.reduction)


@dataclass(frozen=True)
class LogitLoss:
    """Weighted sum of the output logits; `weights` has the output's shape."""

    weights: Array

    @classmethod
    def for_class(cls, batch: int, class_count: int, class_index: int) -> LogitLoss:
        """Loss whose input gradient is ∂Z_k/∂x for every row."""
        if not 0 <= class_index < class_count:
            error_msg = f"class {class_index} is outside [0, {class_count})"
            raise InputError(error_msg)
        weights = np.zeros((batch, class_count), dtype=np.float64)
        weights[:, class_index] = 1.0
        return cls(weights)

    def validate(self, class_count: int) -> None:
        if self.weights.ndim != 2 or self.weights.shape[1] != class_count:
            error_msg = f"logit weights of shape {self.weights.shape} do not fit {class_count} classes"
            raise InputError(error_msg)

    def __call__(self, outputs: Tensor) -> Tensor:
        return (outputs * Tensor(self.weights, dtype=outputs.dtype)).sum()


@dataclass(frozen=True)
class SquaredLoss:
    """Sum of squared differences between the outputs and a constant target."""

    target: float = 0.0

    def validate(self, class_count: int) -> None:  # noqa: ARG002
        return

    def __call__(self, outputs: Tensor) -> Tensor:
        diff = outputs - self.target
        return (diff * diff).sum()


def input_gradient(model: DifferentiableModel, x: Array, loss: LossSpec) -> Array:
    """Gradient of `loss` with respect to the model input.

    Model parameters stay out of the tape, so nothing accumulates on them and a shared model
    can be differentiated from several tapes at once.

    Args:
        model: The model to differentiate through
        x: Input batch in the model's input shape
        loss: Scalar objective over the model outputs

    Returns:
        ∂loss/∂x, same shape as `x`, in the model's dtype

    Raises:
        InputError: If the loss refers to a class the model does not have
    """
    loss.validate(model.class_count)
    inputs = Tensor(x, requires_grad=True, dtype=model.dtype)
    objective = loss(model.forward(inputs))
    objective.backward()
    assert inputs.grad is not None
    return inputs.grad


def iter_batches(count: int, batch_size: int) -> Iterator[slice]:
    """Consecutive slices covering `range(count)`."""
    for start in range(0, count, batch_size):
        yield slice(start, min(start + batch_size, count))

