"""Tests for MNIST loading, adversarial sets and activation trace sets."""

from __future__ import annotations

import struct
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from dla_guard.datasets import (
    IMAGE_MAGIC,
    MNIST_FILES,
    ActivationTraceSet,
    AdversarialSet,
    LabeledImageSet,
    Split,
    balanced_merge,
    cap_per_class,
    concatenate_traces,
    distortions,
    load_adversarial_set,
    load_mnist,
    load_traces,
    read_idx_images,
    save_adversarial_set,
    save_traces,
)
from dla_guard.exceptions import BindingError, FormatError, InputError


def _traces(
    count: int, label: int, model_id: str = "m1", width: int = 3, split: Split = Split.TEST
) -> ActivationTraceSet:
    values = np.arange(count * width, dtype=np.float32).reshape(count, width) + 100 * label
    return ActivationTraceSet(values, np.full(count, label), "fgsm" if label else "benign", model_id, split)


def _adversarial(count: int = 4) -> AdversarialSet:
    originals = np.full((count, 1, 2, 2), 0.5, dtype=np.float32)
    perturbed = originals.copy()
    perturbed[:, 0, 0, 0] = 0.8
    l2, linf = distortions(originals, perturbed)
    return AdversarialSet(
        originals=originals,
        perturbed=perturbed,
        true_labels=np.zeros(count),
        predicted_labels=np.ones(count),
        target_labels=np.full(count, -1),
        attack_tag="fgsm",
        l2=l2,
        linf=linf,
        success=np.ones(count, dtype=bool),
        source_split=Split.TEST,
        model_id="m1",
        params={"attack": {"epsilon": 0.3}},
    )


def test_load_mnist_plain_and_gzipped(mnist_dir: Path) -> None:
    """Both splits load, scaled to [0, 1] with a channel axis."""
    train, test = load_mnist(mnist_dir)
    assert train.images.shape == (60, 1, 28, 28)
    assert test.images.shape == (30, 1, 28, 28)
    assert train.split == Split.TRAIN
    assert test.split == Split.TEST
    assert train.images.dtype == np.float32
    assert float(train.images.max()) == pytest.approx(230 / 255)
    assert train.labels[:10].tolist() == list(range(10))


def test_bad_magic_names_the_file(tmp_path: Path, idx_writer: Callable[..., None]) -> None:
    """A wrong magic number is a FormatError naming the file."""
    idx_writer(tmp_path, Split.TRAIN, np.zeros((2, 3, 3)), np.zeros(2))
    path = tmp_path / MNIST_FILES[Split.TRAIN][0]
    data = path.read_bytes()
    path.write_bytes(struct.pack(">I", 1234) + data[4:])
    with pytest.raises(FormatError, match="train-images-idx3-ubyte: bad magic"):
        read_idx_images(path)


def test_truncated_idx_file(tmp_path: Path) -> None:
    """An image file with fewer pixels than the header promises is rejected."""
    path = tmp_path / "images"
    path.write_bytes(struct.pack(">IIII", IMAGE_MAGIC, 2, 2, 2) + bytes(5))
    with pytest.raises(FormatError, match="expected 8 pixel bytes"):
        read_idx_images(path)


def test_label_count_mismatch(tmp_path: Path, idx_writer: Callable[..., None]) -> None:
    """Image and label files disagreeing on the count are rejected."""
    idx_writer(tmp_path, Split.TRAIN, np.zeros((3, 2, 2)), np.zeros(2))
    idx_writer(tmp_path, Split.TEST, np.zeros((1, 2, 2)), np.zeros(1))
    with pytest.raises(FormatError, match="3 images but"):
        load_mnist(tmp_path)


def test_missing_idx_file(tmp_path: Path) -> None:
    """A missing file is a FormatError."""
    with pytest.raises(FormatError, match="not found"):
        read_idx_images(tmp_path / "nothing")


def test_labeled_image_set_validation() -> None:
    """Pixels outside [0, 1] and mismatched labels are rejected."""
    with pytest.raises(InputError, match="outside"):
        LabeledImageSet(np.full((1, 1, 2, 2), 1.5), np.zeros(1), Split.TEST)
    with pytest.raises(InputError, match="do not match"):
        LabeledImageSet(np.zeros((2, 1, 2, 2)), np.zeros(3), Split.TEST)


def test_cap_per_class_is_balanced_and_ordered(images_factory: Callable[..., LabeledImageSet]) -> None:
    """The cap keeps the first samples of each class in file order."""
    data = images_factory(30)
    capped = cap_per_class(data, 6)
    assert len(capped) == 6
    assert capped.labels.tolist() == [0, 1, 2, 0, 1, 2]
    assert cap_per_class(data, None) is data
    assert cap_per_class(data, 100) is data
    with pytest.raises(InputError):
        cap_per_class(data, 0)


def test_distortions() -> None:
    """L2 and L∞ norms per sample."""
    originals = np.zeros((2, 1, 2, 2))
    perturbed = originals.copy()
    perturbed[0, 0, 0, :] = [0.3, 0.4]
    l2, linf = distortions(originals, perturbed)
    np.testing.assert_allclose(l2, [0.5, 0.0])
    np.testing.assert_allclose(linf, [0.4, 0.0])


def test_adversarial_set_validation() -> None:
    """Wrong distortions and successes that keep the true label are rejected."""
    adv = _adversarial()
    with pytest.raises(InputError, match="distortions"):
        AdversarialSet(**{**vars(adv), "l2": adv.l2 + 0.1})
    with pytest.raises(InputError, match="keeps its true label"):
        AdversarialSet(**{**vars(adv), "predicted_labels": adv.true_labels})


def test_adversarial_set_histograms() -> None:
    """Achieved and intended histograms count predictions and targets."""
    adv = _adversarial()
    assert adv.achieved_histogram(3) == [0, 4, 0]
    assert adv.intended_histogram(3) == [0, 0, 0]
    assert len(adv.select(np.array([True, False, True, False]))) == 2


def test_adversarial_set_file_round_trip(tmp_path: Path) -> None:
    """A saved set loads back with params, and empty sets are allowed."""
    adv = _adversarial()
    save_adversarial_set(adv, tmp_path / "adv.dla")
    loaded = load_adversarial_set(tmp_path / "adv.dla")
    np.testing.assert_array_equal(loaded.perturbed, adv.perturbed)
    assert loaded.params == adv.params
    assert loaded.source_split == Split.TEST

    save_adversarial_set(adv.select(np.zeros(4, dtype=bool)), tmp_path / "empty.dla")
    assert len(load_adversarial_set(tmp_path / "empty.dla")) == 0


def test_trace_set_validation() -> None:
    """Labels other than 0/1 and mismatched shapes are rejected."""
    with pytest.raises(InputError, match="0 \\(benign\\)"):
        ActivationTraceSet(np.zeros((2, 3)), np.array([0, 2]), "x", "m", Split.TEST)
    with pytest.raises(InputError, match="pair up"):
        ActivationTraceSet(np.zeros((2, 3)), np.array([0]), "x", "m", Split.TEST)


def test_trace_file_round_trip(tmp_path: Path) -> None:
    """Traces keep values, labels, attack, model id, split and provenance."""
    traces = _traces(4, 1)
    traces.provenance["seed"] = 7
    save_traces(traces, tmp_path / "t.dla")
    loaded = load_traces(tmp_path / "t.dla")
    np.testing.assert_array_equal(loaded.traces, traces.traces)
    assert (loaded.attack_tag, loaded.target_model_id, loaded.split) == ("fgsm", "m1", Split.TEST)
    assert loaded.provenance == {"seed": 7}


def test_balanced_merge_is_balanced_and_deterministic() -> None:
    """The larger class is subsampled to the smaller; the same seed gives the same rows."""
    benign, adversarial = _traces(10, 0), _traces(4, 1)
    merged = balanced_merge(benign, adversarial, seed=3)
    assert len(merged) == 8
    assert int(merged.labels.sum()) == 4
    assert merged.attack_tag == "fgsm"
    again = balanced_merge(benign, adversarial, seed=3)
    np.testing.assert_array_equal(merged.traces, again.traces)
    adversarial_rows = merged.traces[merged.labels == 1]
    assert np.all(adversarial_rows >= 100)


def test_merge_checks_width_and_binding() -> None:
    """Different widths are an InputError, different target models a BindingError."""
    with pytest.raises(InputError, match="width"):
        balanced_merge(_traces(3, 0, width=3), _traces(3, 1, width=4), seed=0)
    with pytest.raises(BindingError):
        balanced_merge(_traces(3, 0, model_id="a"), _traces(3, 1, model_id="b"), seed=0)


def test_concatenate_traces() -> None:
    """Concatenation stacks rows and requires at least one set."""
    combined = concatenate_traces([_traces(2, 0), _traces(3, 1)], "combined")
    assert len(combined) == 5
    assert combined.attack_tag == "combined"
    with pytest.raises(InputError):
        concatenate_traces([], "combined")
