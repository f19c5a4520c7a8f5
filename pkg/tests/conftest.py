"""Test configuration and fixtures."""

from __future__ import annotations

import gzip
import struct
from collections.abc import Callable, Generator
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from loguru import logger

from dla_guard.attacks import AttackConfig, AttackKind, craft_set
from dla_guard.datasets import (
    IMAGE_MAGIC,
    LABEL_MAGIC,
    MNIST_FILES,
    ActivationTraceSet,
    AdversarialSet,
    LabeledImageSet,
    Split,
)
from dla_guard.dla import AlarmConfig, AlarmModel, extract_adversarial, extract_benign, train_alarm
from dla_guard.models import LayerSpec, NetworkModel, TrainConfig, fit
from dla_guard.tensor import Array

TINY_SHAPE = (1, 4, 4)


@pytest.fixture(autouse=True)
def disable_logging() -> Generator[None, None, None]:
    """Disable logging during tests."""
    logger.remove()
    yield
    logger.add(lambda _: None)  # Add a no-op handler


def numeric_gradient(f: Callable[[Array], float], x: Array, step: float = 1e-6) -> Array:
    """Central finite differences of a scalar function, in float64."""
    x = np.asarray(x, dtype=np.float64).copy()
    grad = np.zeros_like(x)
    for index in np.ndindex(*x.shape):
        saved = x[index]
        x[index] = saved + step
        upper = f(x)
        x[index] = saved - step
        lower = f(x)
        x[index] = saved
        grad[index] = (upper - lower) / (2 * step)
    return grad


@pytest.fixture
def finite_difference() -> Callable[..., Array]:
    return numeric_gradient


def make_tiny_model(seed: int = 3, **kwargs: object) -> NetworkModel:
    layers = [LayerSpec.flatten(), LayerSpec.dense(6), LayerSpec.relu(), LayerSpec.dense(3)]
    return NetworkModel(TINY_SHAPE, layers, seed=seed, name="tiny", **kwargs)  # type: ignore[arg-type]


@pytest.fixture
def tiny_model() -> NetworkModel:
    """Flatten, dense(6), relu, dense(3) over 1×4×4 inputs; trace width 9."""
    return make_tiny_model()


def make_tiny_images(count: int = 30, split: Split = Split.TRAIN, seed: int = 0) -> LabeledImageSet:
    """Three separable classes: class k lights up row k of a 4×4 image."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 3
    images = rng.uniform(0.0, 0.2, size=(count, *TINY_SHAPE))
    for i, label in enumerate(labels):
        images[i, 0, label, :] = 0.9
    return LabeledImageSet(images.astype(np.float32), labels, split)


@pytest.fixture
def tiny_images() -> LabeledImageSet:
    return make_tiny_images()


def write_idx_pair(directory: Path, split: Split, images: Array, labels: Array, gz: bool = False) -> None:
    """Write one split as big-endian IDX3/IDX1 files, optionally gzipped."""
    image_name, label_name = MNIST_FILES[split]
    count, rows, cols = images.shape
    image_bytes = struct.pack(">IIII", IMAGE_MAGIC, count, rows, cols) + images.astype(np.uint8).tobytes()
    label_bytes = struct.pack(">II", LABEL_MAGIC, count) + labels.astype(np.uint8).tobytes()
    for name, payload in ((image_name, image_bytes), (label_name, label_bytes)):
        if gz:
            (directory / f"{name}.gz").write_bytes(gzip.compress(payload))
        else:
            (directory / name).write_bytes(payload)


def synthetic_digits(count: int, seed: int) -> tuple[Array, Array]:
    """28×28 uint8 images where class k is a bright horizontal band at rows 2k..2k+4."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 10
    images = rng.integers(0, 40, size=(count, 28, 28))
    for i, label in enumerate(labels):
        images[i, 2 * label : 2 * label + 5, 4:24] = 230
    return images.astype(np.uint8), labels.astype(np.uint8)


@pytest.fixture
def mnist_dir(tmp_path: Path) -> Path:
    """A small MNIST look-alike: 60 train images as plain IDX, 30 test images gzipped."""
    directory = tmp_path / "mnist"
    directory.mkdir()
    write_idx_pair(directory, Split.TRAIN, *synthetic_digits(60, seed=1))
    write_idx_pair(directory, Split.TEST, *synthetic_digits(30, seed=2), gz=True)
    return directory


@pytest.fixture
def model_factory() -> Callable[..., NetworkModel]:
    return make_tiny_model


@pytest.fixture
def images_factory() -> Callable[..., LabeledImageSet]:
    return make_tiny_images


@pytest.fixture
def idx_writer() -> Callable[..., None]:
    return write_idx_pair


@pytest.fixture
def trained_model() -> NetworkModel:
    """The tiny model after 30 epochs of Adam on the separable three-class images."""
    model = make_tiny_model(seed=0)
    data = make_tiny_images(60)
    fit(model, data.images, data.labels, TrainConfig(epochs=30, batch_size=10, learning_rate=0.05))
    return model


@dataclass
class AlarmKit:
    """A trained target with BIM sets, their traces and a dedicated alarm."""

    target: NetworkModel
    train: LabeledImageSet
    test: LabeledImageSet
    adv_train: AdversarialSet
    adv_test: AdversarialSet
    benign_train: ActivationTraceSet
    benign_test: ActivationTraceSet
    traces_train: ActivationTraceSet
    traces_test: ActivationTraceSet
    alarm: AlarmModel


ALARM_TEST_CONFIG = AlarmConfig(epochs=20, batch_size=10, learning_rate=0.01)


@pytest.fixture
def alarm_kit(trained_model: NetworkModel) -> AlarmKit:
    attack = AttackConfig(kind=AttackKind.BIM, epsilon=0.5, step_size=0.05, iterations=20)
    train = make_tiny_images(60, Split.TRAIN, seed=0)
    test = make_tiny_images(30, Split.TEST, seed=1)
    adv_train = craft_set(trained_model, train, attack)
    adv_test = craft_set(trained_model, test, attack)
    benign_train = extract_benign(trained_model, train)
    traces_train = extract_adversarial(trained_model, adv_train)
    alarm = train_alarm(benign_train, traces_train, seed=0, cfg=ALARM_TEST_CONFIG)
    return AlarmKit(
        target=trained_model,
        train=train,
        test=test,
        adv_train=adv_train,
        adv_test=adv_test,
        benign_train=benign_train,
        benign_test=extract_benign(trained_model, test),
        traces_train=traces_train,
        traces_test=extract_adversarial(trained_model, adv_test),
        alarm=alarm,
    )
