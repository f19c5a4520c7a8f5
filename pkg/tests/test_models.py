"""Tests for the layer-list networks, training and model files."""

from __future__ import annotations

from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest
from pytest_mock import MockerFixture

from dla_guard.container import KIND_MODEL, read_container, write_container
from dla_guard.datasets import LabeledImageSet, Split
from dla_guard.exceptions import FormatError, InputError, TrainingError
from dla_guard.models import (
    ALARM_HIDDEN_WIDTHS,
    ARCHITECTURES,
    LayerKind,
    LayerSpec,
    NetworkModel,
    OptimizerKind,
    TrainConfig,
    TraceMode,
    accuracy,
    build_alarm_network,
    build_lenet,
    build_mlp512,
    fit,
    load_model,
    load_stored_model,
    save_model,
    train,
)
from dla_guard.tensor import Tensor


def test_builtin_trace_widths() -> None:
    """LeNet traces 120 + 84 + 10 dense units, MLP512 traces 512 + 10."""
    assert build_lenet().trace_width == 214
    assert build_mlp512().trace_width == 522
    assert build_alarm_network(522).trace_width == sum(ALARM_HIDDEN_WIDTHS) + 2
    assert set(ARCHITECTURES) == {"lenet", "mlp512"}


def test_lenet_forward_shapes() -> None:
    """LeNet maps 1×28×28 images to 10 logits and a 214-wide trace."""
    model = build_lenet(seed=1)
    logits, trace = model.forward_with_trace(Tensor(np.zeros((2, 1, 28, 28))))
    assert logits.shape == (2, 10)
    assert trace.shape == (2, 214)


def test_layer_spec_validation() -> None:
    """Dense layers must be tapped and sizes must be positive."""
    with pytest.raises(InputError, match="activation tap"):
        LayerSpec(LayerKind.DENSE, units=4)
    with pytest.raises(InputError, match="only dense"):
        LayerSpec(LayerKind.RELU, is_dense_tap=True)
    with pytest.raises(InputError, match="non-positive"):
        LayerSpec.conv(0, 3)
    assert LayerSpec.from_dict(LayerSpec.dense(5).to_dict()) == LayerSpec.dense(5)


@pytest.mark.parametrize(
    ("layers", "message"),
    [
        ([LayerSpec.dense(3)], "flat input"),
        ([LayerSpec.conv(2, 5), LayerSpec.flatten(), LayerSpec.dense(3)], "does not fit"),
        ([LayerSpec.maxpool(3), LayerSpec.flatten(), LayerSpec.dense(3)], "does not divide"),
        ([LayerSpec.flatten(), LayerSpec.softmax_output(), LayerSpec.dense(3)], "last layer"),
        ([LayerSpec.flatten()], "dense classification layer"),
    ],
)
def test_invalid_architectures(layers: list[LayerSpec], message: str) -> None:
    """Layer lists that do not fit a 1×4×4 input are rejected."""
    with pytest.raises(InputError, match=message):
        NetworkModel((1, 4, 4), layers)


def test_trace_modes(model_factory: Callable[..., NetworkModel]) -> None:
    """The three trace modes record post-ReLU, pre-activation or softmax values."""
    x = np.random.default_rng(0).uniform(size=(5, 1, 4, 4)).astype(np.float32)
    default = model_factory()
    pre = model_factory(trace_mode=TraceMode.ALL_PRE_ACTIVATION)
    post = model_factory(trace_mode=TraceMode.ALL_POST_ACTIVATION)

    default_trace = default.traces(x)
    pre_trace = pre.traces(x)
    post_trace = post.traces(x)
    assert default_trace.shape == pre_trace.shape == post_trace.shape == (5, 9)
    np.testing.assert_allclose(default_trace[:, :6], np.maximum(pre_trace[:, :6], 0), rtol=1e-6)
    np.testing.assert_allclose(default_trace[:, 6:], default.logits(x), rtol=1e-6)
    np.testing.assert_allclose(post_trace[:, 6:].sum(axis=1), np.ones(5), rtol=1e-5)


def test_forward_with_trace_logits_match_forward(tiny_model: NetworkModel) -> None:
    """The traced pass returns exactly the plain forward logits."""
    x = Tensor(np.random.default_rng(1).uniform(size=(3, 1, 4, 4)))
    logits, _ = tiny_model.forward_with_trace(x)
    np.testing.assert_array_equal(logits.data, tiny_model.forward(x).data)


def test_input_shape_is_checked(tiny_model: NetworkModel) -> None:
    """Inputs of the wrong shape raise InputError."""
    with pytest.raises(InputError, match="expected input of shape"):
        tiny_model.predict(np.zeros((2, 1, 5, 5), dtype=np.float32))


def test_empty_batches(tiny_model: NetworkModel) -> None:
    """Empty batches give empty outputs of the right width."""
    empty = np.zeros((0, 1, 4, 4), dtype=np.float32)
    assert tiny_model.logits(empty).shape == (0, 3)
    assert tiny_model.traces(empty).shape == (0, 9)


def test_model_id_tracks_parameters(model_factory: Callable[..., NetworkModel]) -> None:
    """Equal parameters give equal ids; any change gives a new one."""
    first, second = model_factory(seed=1), model_factory(seed=1)
    assert first.model_id == second.model_id
    assert len(first.model_id) == 16
    second.params["1.bias"][0] += 1.0
    assert first.model_id != second.model_id
    assert model_factory(seed=2).model_id != first.model_id


def test_fit_learns_separable_classes(
    model_factory: Callable[..., NetworkModel], images_factory: Callable[..., LabeledImageSet]
) -> None:
    """A few epochs of Adam separate the three synthetic classes."""
    model = model_factory(seed=0)
    data = images_factory(60)
    model, log = train(model, data, TrainConfig(epochs=30, batch_size=10, learning_rate=0.05))
    assert len(log.epochs) == 30
    assert log.epochs[-1].loss < log.epochs[0].loss
    assert accuracy(model, data) >= 0.9
    assert log.to_rows()[0][0] == 0


def test_fit_is_deterministic(
    model_factory: Callable[..., NetworkModel], images_factory: Callable[..., LabeledImageSet]
) -> None:
    """Same seed, config and data give bit-identical parameters."""
    data = images_factory(20)
    cfg = TrainConfig(epochs=2, batch_size=7, optimizer=OptimizerKind.SGD, learning_rate=0.1, seed=4)
    first, second = model_factory(), model_factory()
    fit(first, data.images, data.labels, cfg)
    fit(second, data.images, data.labels, cfg)
    assert first.model_id == second.model_id


def test_zero_learning_rate_leaves_parameters(
    tiny_model: NetworkModel, images_factory: Callable[..., LabeledImageSet]
) -> None:
    """A learning rate of 0 trains without changing anything."""
    before = tiny_model.model_id
    data = images_factory(9)
    fit(tiny_model, data.images, data.labels, TrainConfig(epochs=1, learning_rate=0.0, optimizer=OptimizerKind.SGD))
    assert tiny_model.model_id == before


def test_train_requires_train_split(
    tiny_model: NetworkModel, images_factory: Callable[..., LabeledImageSet]
) -> None:
    """Targets are only trained on the train split."""
    with pytest.raises(InputError, match="train split"):
        train(tiny_model, images_factory(6, split=Split.TEST), TrainConfig(epochs=1))


def test_train_config_validation() -> None:
    """Epochs and batch size must be at least 1, the optimizer known."""
    with pytest.raises(InputError):
        TrainConfig(epochs=0)
    with pytest.raises(InputError):
        TrainConfig(batch_size=0)
    with pytest.raises(InputError, match="optimizer"):
        TrainConfig(optimizer="rmsprop")  # type: ignore[arg-type]


def test_divergence_raises_training_error(
    tiny_model: NetworkModel, images_factory: Callable[..., LabeledImageSet], mocker: MockerFixture
) -> None:
    """A non-finite loss stops training with the epoch number."""
    data = images_factory(6)
    mocker.patch.object(tiny_model, "loss_and_grads", return_value=(float("nan"), 0, {}))
    with pytest.raises(TrainingError, match="epoch 0") as excinfo:
        fit(tiny_model, data.images, data.labels, TrainConfig(epochs=2))
    assert excinfo.value.epoch == 0


def test_fit_rejects_empty_data(tiny_model: NetworkModel) -> None:
    """Training on no samples is an InputError."""
    with pytest.raises(InputError):
        fit(tiny_model, np.zeros((0, 1, 4, 4)), np.zeros(0, dtype=np.int64), TrainConfig())


def test_save_and_load_model(tmp_path: Path, tiny_model: NetworkModel) -> None:
    """A saved model loads back with the same id, predictions and extra metadata."""
    path = tmp_path / "models" / "tiny.dla"
    save_model(tiny_model, path, extra={"test_accuracy": 0.5}, aux={"mean": np.ones(9, dtype=np.float32)})
    stored = load_stored_model(path, tiny_model.layers)
    assert stored.model.model_id == tiny_model.model_id
    assert stored.extra == {"test_accuracy": 0.5}
    np.testing.assert_array_equal(stored.aux["mean"], np.ones(9))
    x = np.random.default_rng(2).uniform(size=(4, 1, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(load_model(path).predict(x), tiny_model.predict(x))


def test_load_model_rejects_other_architecture(tmp_path: Path, tiny_model: NetworkModel) -> None:
    """Loading with different expected layers is a FormatError."""
    path = tmp_path / "tiny.dla"
    save_model(tiny_model, path)
    with pytest.raises(FormatError, match="does not match the expected layers"):
        load_model(path, build_mlp512().layers)


def test_load_model_detects_tampered_parameters(tmp_path: Path, tiny_model: NetworkModel) -> None:
    """Parameters that no longer hash to the stored id are rejected."""
    path = tmp_path / "tiny.dla"
    save_model(tiny_model, path)
    metadata, arrays = read_container(path, KIND_MODEL)
    arrays["1.bias"] = arrays["1.bias"] + 1.0
    write_container(path, KIND_MODEL, metadata, arrays)
    with pytest.raises(FormatError, match="model id"):
        load_model(path)


def test_astype_keeps_predictions(tiny_model: NetworkModel) -> None:
    """A float64 copy predicts the same classes and leaves the original untouched."""
    x = np.random.default_rng(3).uniform(size=(6, 1, 4, 4)).astype(np.float32)
    wide = tiny_model.astype(np.float64)
    assert wide.dtype == np.float64
    assert tiny_model.dtype == np.float32
    np.testing.assert_array_equal(wide.predict(x.astype(np.float64)), tiny_model.predict(x))
    np.testing.assert_allclose(wide.probabilities(x).sum(axis=1), np.ones(6))
