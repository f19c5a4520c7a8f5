"""Tests for the autograd engine."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np
import pytest

from dla_guard.exceptions import DimensionError, InputError, NumericError
from dla_guard.models import NetworkModel
from dla_guard.tensor import (
    Array,
    CrossEntropyLoss,
    LogitLoss,
    SquaredLoss,
    Tensor,
    clamp_min,
    concat,
    conv2d,
    input_gradient,
    iter_batches,
    matmul,
    maxpool2d,
    pick,
    relu,
    row_max,
    softmax,
    softmax_cross_entropy,
    softmax_rows,
    tanh,
)

Op = Callable[..., Tensor]


def _check_gradients(op: Op, arrays: list[Array], finite_difference: Callable[..., Array], seed: int = 0) -> None:
    """Compare the tape gradient of sum(op(...) * w) with central differences, per input."""
    inputs = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = op(*inputs)
    weights = np.random.default_rng(seed).normal(size=out.shape)
    (out * Tensor(weights)).sum().backward()

    for position, array in enumerate(arrays):

        def objective(value: Array, position: int = position) -> float:
            args = [Tensor(np.asarray(a, dtype=np.float64)) for a in arrays]
            args[position] = Tensor(value)
            return float((op(*args).data * weights).sum())

        expected = finite_difference(objective, array)
        actual = inputs[position].grad
        assert actual is not None
        np.testing.assert_allclose(actual, expected, rtol=1e-5, atol=1e-6)


DRAW_COUNT = 100


def _away_from(values: Array, kink: float, gap: float = 0.05) -> Array:
    """Push entries within `gap` of a kink further out, keeping their side."""
    near = np.abs(values - kink) < gap
    return np.where(near, values + np.where(values >= kink, gap, -gap), values)


Draw = Callable[[np.random.Generator], list[Array]]

RANDOM_DRAWS: dict[str, tuple[Op, Draw]] = {
    "matmul": (matmul, lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]),
    "add": (lambda a, b: a + b, lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
    "sub": (lambda a, b: a - b, lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))]),
    "mul": (lambda a, b: a * b, lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
    "sum": (lambda x: x.sum(axis=1), lambda rng: [rng.normal(size=(3, 4))]),
    "conv2d": (
        conv2d,
        lambda rng: [rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=(2,))],
    ),
    "maxpool2d": (lambda x: maxpool2d(x, 2), lambda rng: [rng.permutation(32).reshape(1, 2, 4, 4) / 7.0]),
    "relu": (relu, lambda rng: [_away_from(rng.normal(size=(2, 3)), 0.0)]),
    "tanh": (tanh, lambda rng: [rng.normal(size=(2, 3))]),
    "clamp_min": (lambda x: clamp_min(x, -0.5), lambda rng: [_away_from(rng.normal(size=(2, 3)), -0.5)]),
    "softmax": (softmax_rows, lambda rng: [rng.normal(size=(3, 4))]),
    "cross_entropy": (
        lambda z: softmax_cross_entropy(z, np.array([0, 2, 1])),
        lambda rng: [rng.normal(size=(3, 3))],
    ),
    "pick": (lambda x: pick(x, np.array([1, 0, 3])), lambda rng: [rng.normal(size=(3, 4))]),
    "row_max": (row_max, lambda rng: [rng.permutation(12).reshape(3, 4) / 5.0]),
    "reshape": (lambda x: x.reshape(2, 6), lambda rng: [rng.normal(size=(3, 4))]),
    "concat": (
        lambda a, b: concat([a, b], axis=1),
        lambda rng: [rng.normal(size=(3, 4)), rng.normal(size=(3, 2))],
    ),
}


@pytest.mark.parametrize("name", sorted(RANDOM_DRAWS))
def test_gradients_on_random_draws(name: str, finite_difference: Callable[..., Array]) -> None:
    """Every differentiable op agrees with central differences on 100 seeded random inputs."""
    op, draw = RANDOM_DRAWS[name]
    for seed in range(DRAW_COUNT):
        _check_gradients(op, draw(np.random.default_rng(seed)), finite_difference, seed=seed)


def test_tensor_dtype_defaults() -> None:
    """Integer data becomes float32; float64 data stays float64."""
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=np.float64)).dtype == np.float64
    assert Tensor(np.zeros(2), dtype=np.float32).dtype == np.float32


def test_matmul_gradient(finite_difference: Callable[..., Array]) -> None:
    """MatMul gradients match finite differences for both operands."""
    rng = np.random.default_rng(1)
    _check_gradients(matmul, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))], finite_difference)


def test_broadcast_add_sub_mul_gradients(finite_difference: Callable[..., Array]) -> None:
    """Broadcast operands receive gradients summed over the broadcast axis."""
    rng = np.random.default_rng(2)
    arrays = [rng.normal(size=(3, 4)), rng.normal(size=(4,))]
    _check_gradients(lambda a, b: a + b, arrays, finite_difference)
    _check_gradients(lambda a, b: a - b, arrays, finite_difference)
    _check_gradients(lambda a, b: a * b, arrays, finite_difference)


def test_conv2d_gradient(finite_difference: Callable[..., Array]) -> None:
    """Conv2d gradients for input, kernels and bias match finite differences."""
    rng = np.random.default_rng(3)
    arrays = [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3,))]
    _check_gradients(conv2d, arrays, finite_difference)


def test_conv2d_output_shape() -> None:
    """Valid padding with stride 1 shrinks each side by kernel - 1."""
    out = conv2d(Tensor(np.zeros((1, 1, 28, 28))), Tensor(np.zeros((6, 1, 5, 5))), Tensor(np.zeros(6)))
    assert out.shape == (1, 6, 24, 24)


def test_maxpool_gradient(finite_difference: Callable[..., Array]) -> None:
    """MaxPool routes the gradient to each window's maximum."""
    values = np.random.default_rng(4).permutation(32).reshape(1, 2, 4, 4) / 7.0
    _check_gradients(lambda x: maxpool2d(x, 2), [values], finite_difference)


def test_maxpool_tie_goes_to_first_element() -> None:
    """With equal values the first element in row-major order receives the gradient."""
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    maxpool2d(x, 2).sum().backward()
    assert x.grad is not None
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_elementwise_gradients(finite_difference: Callable[..., Array]) -> None:
    """ReLU, tanh and clamp_min gradients away from their kinks."""
    values = np.array([[-1.5, -0.3, 0.4], [0.9, -2.0, 1.7]])
    _check_gradients(relu, [values], finite_difference)
    _check_gradients(tanh, [values], finite_difference)
    _check_gradients(lambda x: clamp_min(x, -0.5), [values], finite_difference)


def test_relu_subgradient_at_zero() -> None:
    """ReLU passes no gradient at exactly zero."""
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    relu(x).sum().backward()
    assert x.grad is not None
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_softmax_and_cross_entropy_gradients(finite_difference: Callable[..., Array]) -> None:
    """Softmax rows and the fused cross-entropy differentiate correctly."""
    logits = np.random.default_rng(5).normal(size=(4, 3))
    labels = np.array([0, 2, 1, 2])
    _check_gradients(softmax_rows, [logits], finite_difference)
    _check_gradients(lambda z: softmax_cross_entropy(z, labels), [logits], finite_difference)
    _check_gradients(lambda z: softmax_cross_entropy(z, labels, "sum"), [logits], finite_difference)


def test_selection_gradients(finite_difference: Callable[..., Array]) -> None:
    """Pick, row_max, reshape and concat gradients."""
    rng = np.random.default_rng(6)
    values = rng.normal(size=(3, 4))
    _check_gradients(lambda x: pick(x, np.array([1, 0, 3])), [values], finite_difference)
    _check_gradients(row_max, [values], finite_difference)
    _check_gradients(lambda x: x.reshape(2, 6), [values], finite_difference)
    _check_gradients(lambda a, b: concat([a, b], axis=1), [values, rng.normal(size=(3, 2))], finite_difference)


def test_cross_entropy_is_stable_for_large_logits() -> None:
    """The max-shift keeps the loss finite for very large logits."""
    loss = softmax_cross_entropy(Tensor(np.array([[1000.0, 0.0]])), np.array([1]))
    assert loss.item() == pytest.approx(1000.0)


def test_gradient_accumulates_over_reuse() -> None:
    """A tensor used twice receives the sum of both contributions."""
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    (x * x + x).sum().backward()
    assert x.grad is not None
    np.testing.assert_allclose(x.grad, [3.0, -3.0, 7.0])


def test_backward_errors() -> None:
    """backward() rejects tensors without gradients and non-scalars without a seed."""
    with pytest.raises(InputError, match="does not require"):
        Tensor(np.ones(1)).backward()
    vector = Tensor(np.ones(3), requires_grad=True) * 2.0
    with pytest.raises(InputError, match="explicit gradient"):
        vector.backward()
    with pytest.raises(DimensionError, match="does not match"):
        vector.backward(np.ones(2))


def test_non_finite_values_raise() -> None:
    """Operations that yield Inf or NaN raise NumericError."""
    with pytest.raises(NumericError, match="Add"):
        _ = Tensor(np.array([np.inf])) + 1.0


def test_shape_errors() -> None:
    """Shape violations raise DimensionError or InputError."""
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        Tensor(np.ones(6)).reshape(4, 2)
    with pytest.raises(DimensionError):
        pick(Tensor(np.ones((2, 3))), np.array([0]))
    with pytest.raises(DimensionError):
        maxpool2d(Tensor(np.ones((1, 1, 5, 5))), 2)
    with pytest.raises(InputError):
        maxpool2d(Tensor(np.ones((1, 1, 4, 4))), 0)
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((3, 1, 3, 3))), Tensor(np.ones(3)))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones(1)))
    with pytest.raises(InputError, match="empty"):
        Tensor(np.zeros((0, 3))).mean()


def test_cross_entropy_argument_errors() -> None:
    """Labels outside the class range, a bad reduction and an empty batch are rejected."""
    logits = Tensor(np.zeros((2, 3)))
    with pytest.raises(InputError, match="labels"):
        softmax_cross_entropy(logits, np.array([0, 3]))
    with pytest.raises(InputError, match="reduction"):
        softmax_cross_entropy(logits, np.array([0, 1]), "max")
    with pytest.raises(InputError, match="empty"):
        softmax_cross_entropy(Tensor(np.zeros((0, 3))), np.zeros(0, dtype=np.int64))


def test_softmax_rows_sum_to_one() -> None:
    """The plain-array softmax returns float64 rows summing to one."""
    probs = softmax(np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]], dtype=np.float32))
    assert probs.dtype == np.float64
    np.testing.assert_allclose(probs.sum(axis=1), [1.0, 1.0])
    np.testing.assert_allclose(probs[1], [1 / 3] * 3)


def test_input_gradient_matches_finite_differences(
    tiny_model: NetworkModel, finite_difference: Callable[..., Array]
) -> None:
    """input_gradient of the cross-entropy matches finite differences in float64."""
    model = tiny_model.astype(np.float64)
    x = np.random.default_rng(7).uniform(size=(2, 1, 4, 4))
    labels = np.array([0, 2])
    grad = input_gradient(model, x, CrossEntropyLoss(labels, reduction="sum"))

    def objective(value: Array) -> float:
        return softmax_cross_entropy(model.forward(Tensor(value)), labels, "sum").item()

    np.testing.assert_allclose(grad, finite_difference(objective, x), rtol=1e-5, atol=1e-7)


def test_input_gradient_leaves_parameters_untouched(tiny_model: NetworkModel) -> None:
    """Differentiating w.r.t. the input does not modify the model."""
    before = {k: v.copy() for k, v in tiny_model.params.items()}
    input_gradient(tiny_model, np.ones((1, 1, 4, 4), dtype=np.float32), SquaredLoss())
    for key, value in tiny_model.params.items():
        np.testing.assert_array_equal(value, before[key])


def test_logit_loss_for_class(tiny_model: NetworkModel) -> None:
    """LogitLoss.for_class selects one logit per row and validates the class index."""
    loss = LogitLoss.for_class(2, 3, 1)
    assert loss.weights[:, 1].tolist() == [1.0, 1.0]
    with pytest.raises(InputError):
        LogitLoss.for_class(2, 3, 3)
    with pytest.raises(InputError):
        input_gradient(tiny_model, np.ones((2, 1, 4, 4)), LogitLoss(np.ones((2, 4))))
    with pytest.raises(InputError, match="outside"):
        input_gradient(tiny_model, np.ones((1, 1, 4, 4)), CrossEntropyLoss(np.array([5])))


def test_iter_batches() -> None:
    """Batches cover the range in order, the last one possibly shorter."""
    assert list(iter_batches(5, 2)) == [slice(0, 2), slice(2, 4), slice(4, 5)]
    assert list(iter_batches(0, 3)) == []
