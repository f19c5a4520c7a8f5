"""Layer-list networks with activation taps on every dense layer.

A `NetworkModel` is an ordered list of `LayerSpec` entries plus one weight and one bias array
per parametrized layer. The same class serves the MNIST target classifiers and the alarm
networks trained on their activation traces.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
from loguru import logger

from .container import KIND_MODEL, read_container, write_container
from .datasets import LabeledImageSet, Split
from .exceptions import FormatError, InputError, NumericError, TrainingError
from .optim import SGD, Adam
from .tensor import (
    Array,
    Tensor,
    concat,
    conv2d,
    matmul,
    maxpool2d,
    relu,
    softmax,
    softmax_cross_entropy,
    softmax_rows,
)

MNIST_INPUT_SHAPE = (1, 28, 28)
ALARM_HIDDEN_WIDTHS = (112, 100, 300, 200, 77)
INFERENCE_BATCH = 1000


class LayerKind(StrEnum):
    DENSE = "dense"
    CONV = "conv"
    MAXPOOL = "maxpool"
    RELU = "relu"
    FLATTEN = "flatten"
    SOFTMAX_OUTPUT = "softmax-output"


class TraceMode(StrEnum):
    """What each dense layer contributes to the activation trace.

    POST_RELU_LOGITS: hidden dense layers after their ReLU, the final layer as raw logits
    ALL_PRE_ACTIVATION: every dense layer before its activation
    ALL_POST_ACTIVATION: hidden layers after their ReLU, the final layer after softmax
    """

    POST_RELU_LOGITS = "post-relu+logits"
    ALL_PRE_ACTIVATION = "all-pre-activation"
    ALL_POST_ACTIVATION = "all-post-activation"


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network.

    Attributes:
        kind: Layer type
        units: Output width of a dense layer
        filters: Number of filters of a conv layer
        kernel: Square kernel size of a conv layer
        pool: Window and stride of a maxpool layer
        is_dense_tap: Whether the layer's output is part of the activation trace
    """

    kind: LayerKind
    units: int = 0
    filters: int = 0
    kernel: int = 0
    pool: int = 0
    is_dense_tap: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kind == LayerKind.DENSE and not self.is_dense_tap:
            error_msg = "every dense layer must be an activation tap"
            raise InputError(error_msg)
        if self.kind != LayerKind.DENSE and self.is_dense_tap:
            error_msg = f"only dense layers can be tapped, not {self.kind}"
            raise InputError(error_msg)
        sizes = {
            LayerKind.DENSE: (self.units,),
            LayerKind.CONV: (self.filters, self.kernel),
            LayerKind.MAXPOOL: (self.pool,),
        }.get(self.kind, ())
        if any(size < 1 for size in sizes):
            error_msg = f"{self.kind} layer has a non-positive size: {self}"
            raise InputError(error_msg)

    @classmethod
    def dense(cls, units: int) -> LayerSpec:
        return cls(LayerKind.DENSE, units=units, is_dense_tap=True)

    @classmethod
    def conv(cls, filters: int, kernel: int) -> LayerSpec:
        return cls(LayerKind.CONV, filters=filters, kernel=kernel)

    @classmethod
    def maxpool(cls, pool: int) -> LayerSpec:
        return cls(LayerKind.MAXPOOL, pool=pool)

    @classmethod
    def relu(cls) -> LayerSpec:
        return cls(LayerKind.RELU)

    @classmethod
    def flatten(cls) -> LayerSpec:
        return cls(LayerKind.FLATTEN)

    @classmethod
    def softmax_output(cls) -> LayerSpec:
        return cls(LayerKind.SOFTMAX_OUTPUT)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["kind"] = self.kind.value
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> LayerSpec:
        return cls(**data)


def _layer_shapes(
    input_shape: tuple[int, ...], layers: list[LayerSpec]
) -> tuple[list[tuple[int, ...]], dict[str, tuple[int, ...]]]:
    """Output shape after each layer and the parameter shapes, keyed "<index>.weight"/"<index>.bias"."""
    shapes: list[tuple[int, ...]] = []
    params: dict[str, tuple[int, ...]] = {}
    shape = input_shape
    for index, layer in enumerate(layers):
        if layer.kind == LayerKind.SOFTMAX_OUTPUT and index != len(layers) - 1:
            error_msg = "softmax-output must be the last layer"
            raise InputError(error_msg)
        if layer.kind == LayerKind.DENSE:
            if len(shape) != 1:
                error_msg = f"dense layer {index} needs a flat input, got {shape}; add a flatten layer"
                raise InputError(error_msg)
            params[f"{index}.weight"] = (shape[0], layer.units)
            params[f"{index}.bias"] = (layer.units,)
            shape = (layer.units,)
        elif layer.kind == LayerKind.CONV:
            if len(shape) != 3 or layer.kernel > min(shape[1:]):
                error_msg = f"conv layer {index} does not fit input {shape}"
                raise InputError(error_msg)
            params[f"{index}.weight"] = (layer.filters, shape[0], layer.kernel, layer.kernel)
            params[f"{index}.bias"] = (layer.filters,)
            shape = (layer.filters, shape[1] - layer.kernel + 1, shape[2] - layer.kernel + 1)
        elif layer.kind == LayerKind.MAXPOOL:
            if len(shape) != 3 or shape[1] % layer.pool or shape[2] % layer.pool:
                error_msg = f"maxpool layer {index} does not divide input {shape}"
                raise InputError(error_msg)
            shape = (shape[0], shape[1] // layer.pool, shape[2] // layer.pool)
        elif layer.kind == LayerKind.FLATTEN:
            shape = (math.prod(shape),)
        shapes.append(shape)
    if not any(layer.kind == LayerKind.DENSE for layer in layers) or len(shape) != 1:
        error_msg = "a network must end in a dense classification layer"
        raise InputError(error_msg)
    return shapes, params


class NetworkModel:
    """A feed-forward network whose dense-layer activations can be traced.

    Attributes:
        input_shape: Shape of one input sample, without the batch axis
        layers: The ordered layer list
        params: Weight and bias arrays by name ("<layer index>.weight", "<layer index>.bias")
        trace_mode: What the dense taps contribute to the trace
        name: Architecture name, recorded in artifacts
    """

    def __init__(
        self,
        input_shape: tuple[int, ...],
        layers: list[LayerSpec],
        params: dict[str, Array] | None = None,
        seed: int = 0,
        trace_mode: TraceMode = TraceMode.POST_RELU_LOGITS,
        name: str = "custom",
        dtype: npt.DTypeLike = np.float32,
    ) -> None:
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = list(layers)
        self.trace_mode = TraceMode(trace_mode)
        self.name = name
        self._shapes, param_shapes = _layer_shapes(self.input_shape, self.layers)
        if params is None:
            params = _he_uniform(param_shapes, seed)
        if set(params) != set(param_shapes) or any(params[k].shape != s for k, s in param_shapes.items()):
            error_msg = f"parameters do not match the {name} architecture"
            raise InputError(error_msg)
        self.params: dict[str, Array] = {k: np.ascontiguousarray(params[k], dtype=dtype) for k in param_shapes}
        self._taps = self._tap_points()

    def __repr__(self) -> str:
        return f"NetworkModel(name={self.name!r}, trace_width={self.trace_width}, params={self.parameter_count})"

    @property
    def dtype(self) -> np.dtype[Any]:
        return next(iter(self.params.values())).dtype

    @property
    def class_count(self) -> int:
        return self._shapes[-1][0]

    @property
    def trace_width(self) -> int:
        return sum(layer.units for layer in self.layers if layer.is_dense_tap)

    @property
    def parameter_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def architecture(self) -> dict[str, Any]:
        return {
            "input_shape": list(self.input_shape),
            "layers": [layer.to_dict() for layer in self.layers],
            "name": self.name,
            "trace_mode": self.trace_mode.value,
        }

    @property
    def model_id(self) -> str:
        """Content hash over the architecture and every parameter bit."""
        digest = hashlib.sha256(json.dumps(self.architecture(), sort_keys=True).encode("utf-8"))
        for key in sorted(self.params):
            digest.update(key.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.params[key], dtype=self.dtype.newbyteorder("<")).tobytes())
        return digest.hexdigest()[:16]

    def astype(self, dtype: npt.DTypeLike) -> NetworkModel:
        """Copy of the model with parameters cast to `dtype`."""
        return NetworkModel(
            self.input_shape, self.layers, self.params, trace_mode=self.trace_mode, name=self.name, dtype=dtype
        )

    def copy(self) -> NetworkModel:
        return self.astype(self.dtype)

    def _tap_points(self) -> dict[int, bool]:
        """Layer index after which to record a tap, mapped to whether softmax is applied first."""
        taps: dict[int, bool] = {}
        dense_indices = [i for i, layer in enumerate(self.layers) if layer.kind == LayerKind.DENSE]
        for index in dense_indices:
            following = self.layers[index + 1].kind if index + 1 < len(self.layers) else None
            if self.trace_mode == TraceMode.ALL_PRE_ACTIVATION:
                taps[index] = False
            elif following == LayerKind.RELU:
                taps[index + 1] = False
            elif index == dense_indices[-1]:
                taps[index] = self.trace_mode == TraceMode.ALL_POST_ACTIVATION
            else:
                taps[index] = False
        return taps

    def _check_input(self, x: Tensor) -> None:
        if x.shape[1:] != self.input_shape:
            error_msg = f"expected input of shape (N, {', '.join(map(str, self.input_shape))}), got {x.shape}"
            raise InputError(error_msg)

    def _run(self, x: Tensor, params: dict[str, Tensor] | None, trace: bool) -> tuple[Tensor, list[Tensor]]:
        self._check_input(x)
        if params is None:
            params = {k: Tensor(v) for k, v in self.params.items()}
        taps: list[Tensor] = []
        out = x
        for index, layer in enumerate(self.layers):
            if layer.kind == LayerKind.DENSE:
                out = matmul(out, params[f"{index}.weight"]) + params[f"{index}.bias"]
            elif layer.kind == LayerKind.CONV:
                out = conv2d(out, params[f"{index}.weight"], params[f"{index}.bias"])
            elif layer.kind == LayerKind.MAXPOOL:
                out = maxpool2d(out, layer.pool)
            elif layer.kind == LayerKind.RELU:
                out = relu(out)
            elif layer.kind == LayerKind.FLATTEN:
                out = out.flatten()
            if trace and index in self._taps:
                taps.append(softmax_rows(out) if self._taps[index] else out)
        return out, taps

    def forward(self, x: Tensor, params: dict[str, Tensor] | None = None) -> Tensor:
        """Logits for a batch.

        Args:
            x: Input batch N×`input_shape`
            params: Parameter tensors to use instead of constant copies of `self.params`;
                training passes leaves that require gradients

        Returns:
            Pre-softmax logits N×`class_count`

        Raises:
            InputError: If `x` does not have the model's input shape
        """
        logits, _ = self._run(x, params, trace=False)
        return logits

    def forward_with_trace(self, x: Tensor, params: dict[str, Tensor] | None = None) -> tuple[Tensor, Tensor]:
        """Logits and the concatenated dense-layer trace N×`trace_width`, from one forward pass.

        The logits are bit-identical to `forward`; the trace stays on the tape, so objectives
        over it can be differentiated back to the input.
        """
        logits, taps = self._run(x, params, trace=True)
        return logits, concat(taps, axis=1)

    def logits(self, x: Array, batch_size: int = INFERENCE_BATCH) -> Array:
        if x.shape[0] == 0:
            return np.zeros((0, self.class_count), dtype=self.dtype)
        return np.concatenate(
            [self.forward(Tensor(x[s], dtype=self.dtype)).data for s in _batches(x.shape[0], batch_size)]
        )

    def predict(self, x: Array, batch_size: int = INFERENCE_BATCH) -> Array:
        """Argmax class per sample as int64."""
        return self.logits(x, batch_size).argmax(axis=1).astype(np.int64)

    def probabilities(self, x: Array, batch_size: int = INFERENCE_BATCH) -> Array:
        """Softmax output per sample, float64."""
        return softmax(self.logits(x, batch_size))

    def traces(self, x: Array, batch_size: int = INFERENCE_BATCH) -> Array:
        """Activation traces M×`trace_width`, float32."""
        if x.shape[0] == 0:
            return np.zeros((0, self.trace_width), dtype=np.float32)
        rows = [
            self.forward_with_trace(Tensor(x[s], dtype=self.dtype))[1].data for s in _batches(x.shape[0], batch_size)
        ]
        return np.concatenate(rows).astype(np.float32)

    def loss_and_grads(self, x: Array, labels: Array) -> tuple[float, int, dict[str, Array]]:
        """Mean cross-entropy of a batch, its correct-prediction count and the parameter gradients."""
        leaves = {k: Tensor(v, requires_grad=True) for k, v in self.params.items()}
        logits = self.forward(Tensor(x, dtype=self.dtype), leaves)
        loss = softmax_cross_entropy(logits, labels)
        loss.backward()
        correct = int((logits.data.argmax(axis=1) == labels).sum())
        grads = {k: t.grad if t.grad is not None else np.zeros_like(t.data) for k, t in leaves.items()}
        return loss.item(), correct, grads


def _batches(count: int, batch_size: int) -> list[slice]:
    return [slice(start, min(start + batch_size, count)) for start in range(0, count, batch_size)]


def _he_uniform(shapes: dict[str, tuple[int, ...]], seed: int) -> dict[str, Array]:
    """Weights drawn from U(±√(6 / fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    params: dict[str, Array] = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = shape[0] if len(shape) == 2 else math.prod(shape[1:])
        limit = math.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return params


def build_lenet(seed: int = 0, trace_mode: TraceMode = TraceMode.POST_RELU_LOGITS) -> NetworkModel:
    """LeNet-style MNIST classifier; trace width 120 + 84 + 10 = 214."""
    layers = [
        LayerSpec.conv(6, 5),
        LayerSpec.relu(),
        LayerSpec.maxpool(2),
        LayerSpec.conv(16, 5),
        LayerSpec.relu(),
        LayerSpec.maxpool(2),
        LayerSpec.flatten(),
        LayerSpec.dense(120),
        LayerSpec.relu(),
        LayerSpec.dense(84),
        LayerSpec.relu(),
        LayerSpec.dense(10),
        LayerSpec.softmax_output(),
    ]
    return NetworkModel(MNIST_INPUT_SHAPE, layers, seed=seed, trace_mode=trace_mode, name="lenet")


def build_mlp512(seed: int = 0, trace_mode: TraceMode = TraceMode.POST_RELU_LOGITS) -> NetworkModel:
    """One hidden layer of 512 units; trace width 512 + 10 = 522."""
    layers = [
        LayerSpec.flatten(),
        LayerSpec.dense(512),
        LayerSpec.relu(),
        LayerSpec.dense(10),
        LayerSpec.softmax_output(),
    ]
    return NetworkModel(MNIST_INPUT_SHAPE, layers, seed=seed, trace_mode=trace_mode, name="mlp512")


def build_alarm_network(trace_width: int, seed: int = 0) -> NetworkModel:
    """Binary benign/adversarial classifier over activation traces."""
    if trace_width < 1:
        error_msg = f"trace width must be positive, got {trace_width}"
        raise InputError(error_msg)
    layers = [LayerSpec.flatten()]
    for width in ALARM_HIDDEN_WIDTHS:
        layers += [LayerSpec.dense(width), LayerSpec.relu()]
    layers += [LayerSpec.dense(2), LayerSpec.softmax_output()]
    return NetworkModel((trace_width,), layers, seed=seed, name="alarm")


ARCHITECTURES = {"lenet": build_lenet, "mlp512": build_mlp512}


class OptimizerKind(StrEnum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch training settings.

    Attributes:
        optimizer: "sgd" or "adam"
        learning_rate: Step size; 0 leaves the parameters untouched
        epochs: Passes over the data, at least 1
        batch_size: Samples per step, at least 1
        seed: Seed of the per-epoch shuffle
        momentum: SGD momentum
        beta1: Adam first-moment decay
        beta2: Adam second-moment decay
        eps: Adam denominator offset
    """

    optimizer: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = 1e-3
    epochs: int = 10
    batch_size: int = 100
    seed: int = 0
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "optimizer", OptimizerKind(self.optimizer))
        except ValueError as err:
            error_msg = f"unknown optimizer {self.optimizer!r}; choose sgd or adam"
            raise InputError(error_msg) from err
        if self.epochs < 1:
            error_msg = f"epochs must be at least 1, got {self.epochs}"
            raise InputError(error_msg)
        if self.batch_size < 1:
            error_msg = f"batch size must be at least 1, got {self.batch_size}"
            raise InputError(error_msg)
        if self.learning_rate < 0:
            error_msg = f"learning rate must not be negative, got {self.learning_rate}"
            raise InputError(error_msg)

    def make_optimizer(self) -> SGD | Adam:
        if self.optimizer == OptimizerKind.SGD:
            return SGD(self.learning_rate, self.momentum)
        return Adam(self.learning_rate, self.beta1, self.beta2, self.eps)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainingLog:
    epochs: list[EpochStats] = field(default_factory=list)

    def to_rows(self) -> list[list[Any]]:
        return [[s.epoch, round(s.loss, 6), round(s.accuracy, 6)] for s in self.epochs]


def fit(model: NetworkModel, inputs: Array, labels: Array, cfg: TrainConfig) -> TrainingLog:
    """Train `model` in place with mini-batch cross-entropy descent.

    Each epoch visits the samples in a permutation drawn from `(cfg.seed, epoch)`, so the
    result depends only on the configuration and the data.

    Raises:
        InputError: If inputs and labels differ in length or the set is empty
        TrainingError: If the loss or the activations become non-finite
    """
    if inputs.shape[0] != labels.shape[0] or inputs.shape[0] == 0:
        error_msg = f"cannot train on {inputs.shape[0]} inputs with {labels.shape[0]} labels"
        raise InputError(error_msg)
    optimizer = cfg.make_optimizer()
    log = TrainingLog()
    count = inputs.shape[0]
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(count)
        total_loss, total_correct = 0.0, 0
        for batch in _batches(count, cfg.batch_size):
            rows = order[batch]
            try:
                loss, correct, grads = model.loss_and_grads(inputs[rows], labels[rows])
            except NumericError as err:
                error_msg = f"training diverged in epoch {epoch}: {err}"
                raise TrainingError(error_msg, epoch=epoch) from err
            if not math.isfinite(loss):
                error_msg = f"training diverged in epoch {epoch}: loss is {loss}"
                raise TrainingError(error_msg, epoch=epoch)
            optimizer.step(model.params, grads)
            total_loss += loss * len(rows)
            total_correct += correct
        stats = EpochStats(epoch, total_loss / count, total_correct / count)
        log.epochs.append(stats)
        logger.info(
            f"{model.name} epoch {epoch + 1}/{cfg.epochs}: loss={stats.loss:.4f} accuracy={stats.accuracy:.4f}"
        )
    return log


def train(model: NetworkModel, data: LabeledImageSet, cfg: TrainConfig) -> tuple[NetworkModel, TrainingLog]:
    """Train a target model on the MNIST train split.

    Raises:
        InputError: If `data` is not the train split
        TrainingError: If training diverges
    """
    if data.split != Split.TRAIN:
        error_msg = f"target models train on the train split, got {data.split}"
        raise InputError(error_msg)
    log = fit(model, data.images, data.labels, cfg)
    return model, log


def accuracy(model: NetworkModel, data: LabeledImageSet) -> float:
    if len(data) == 0:
        return 0.0
    return float((model.predict(data.images) == data.labels).mean())


AUX_PREFIX = "aux:"


@dataclass
class StoredModel:
    """A loaded model with the metadata and auxiliary arrays saved next to it."""

    model: NetworkModel
    extra: dict[str, Any] = field(default_factory=dict)
    aux: dict[str, Array] = field(default_factory=dict)


def save_model(
    model: NetworkModel,
    path: Path,
    extra: dict[str, Any] | None = None,
    aux: dict[str, Array] | None = None,
    kind: bytes = KIND_MODEL,
) -> None:
    """Write the architecture, model id, parameters and any extra metadata to a container."""
    metadata = {"architecture": model.architecture(), "model_id": model.model_id, "extra": extra or {}}
    arrays = dict(model.params)
    arrays.update({AUX_PREFIX + name: value for name, value in (aux or {}).items()})
    write_container(path, kind, metadata, arrays)


def load_stored_model(
    path: Path, expected_layers: list[LayerSpec] | None = None, kind: bytes = KIND_MODEL
) -> StoredModel:
    metadata, arrays = read_container(path, kind)
    params = {k: v for k, v in arrays.items() if not k.startswith(AUX_PREFIX)}
    aux = {k.removeprefix(AUX_PREFIX): v for k, v in arrays.items() if k.startswith(AUX_PREFIX)}
    try:
        arch = metadata["architecture"]
        layers = [LayerSpec.from_dict(entry) for entry in arch["layers"]]
        model = NetworkModel(
            tuple(arch["input_shape"]), layers, params, trace_mode=TraceMode(arch["trace_mode"]), name=arch["name"]
        )
    except (KeyError, TypeError, ValueError, InputError) as err:
        error_msg = f"{path}: invalid model file: {err}"
        raise FormatError(error_msg) from err
    if expected_layers is not None and layers != list(expected_layers):
        error_msg = f"{path}: stored architecture {model.name!r} does not match the expected layers"
        raise FormatError(error_msg)
    if model.model_id != metadata.get("model_id"):
        error_msg = f"{path}: model id does not match the stored parameters"
        raise FormatError(error_msg)
    return StoredModel(model, metadata.get("extra", {}), aux)


def load_model(path: Path, expected_layers: list[LayerSpec] | None = None) -> NetworkModel:
    """Load a model written by `save_model`.

    Raises:
        FormatError: On a bad container, an architecture other than `expected_layers`, or
            parameters that do not hash to the stored model id
    """
    return load_stored_model(path, expected_layers).model
