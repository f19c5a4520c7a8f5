"""MNIST ingestion and the benign, adversarial and activation-trace datasets.

The MNIST IDX files are read bit-exactly (big-endian headers, unsigned byte payload) and scaled
to [0, 1] by dividing by 255. Adversarial sets and activation-trace sets are persisted in the
versioned container described in `dla_guard.container`.
"""

from __future__ import annotations

import gzip
import math
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Any

import numpy as np
from loguru import logger

from .container import KIND_ADVERSARIAL, KIND_TRACES, read_container, write_container
from .exceptions import BindingError, FormatError, InputError
from .tensor import Array

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
DISTORTION_TOLERANCE = 1e-5


class Split(StrEnum):
    TRAIN = "train"
    TEST = "test"


class AttackTag(StrEnum):
    FGSM = "FGSM"
    BIM = "BIM"
    PGD = "PGD"
    DEEPFOOL = "DeepFool"
    CW = "CW"
    TRANSFER = "Transfer"
    ADAPTIVE = "Adaptive"


BENIGN_TAG = "benign"
COMBINED_TAG = "combined"
MISCLASSIFIED_TAG = "misclassified"

L2_ATTACKS = frozenset({AttackTag.DEEPFOOL, AttackTag.CW, AttackTag.ADAPTIVE})
""" Attacks whose native distance metric is L2; the rest are L∞ attacks """

MNIST_FILES: dict[Split, tuple[str, str]] = {
    Split.TRAIN: ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    Split.TEST: ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _check_unit_range(values: Array, what: str) -> None:
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        error_msg = f"{what} has values outside [0, 1]"
        raise InputError(error_msg)


@dataclass(eq=False)
class LabeledImageSet:
    """Images with class labels.

    Attributes:
        images: float32 array N×C×H×W with values in [0, 1]
        labels: int64 class indices, one per image
        split: Which MNIST split the images come from
    """

    images: Array
    labels: Array
    split: Split

    def __post_init__(self) -> None:
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.split = Split(self.split)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            error_msg = f"{self.images.shape[0]} images do not match {self.labels.shape[0]} labels"
            raise InputError(error_msg)
        _check_unit_range(self.images, "image set")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices: Array) -> LabeledImageSet:
        return LabeledImageSet(self.images[indices], self.labels[indices], self.split)


def cap_per_class(data: LabeledImageSet, cap: int | None) -> LabeledImageSet:
    """Deterministic class-balanced subset of at most `cap` samples.

    Each class present contributes its first ⌈cap / classes⌉ samples in file order; the result
    keeps the original order and is truncated to `cap`.
    """
    if cap is None or cap >= len(data):
        return data
    if cap < 1:
        error_msg = f"sample cap must be positive, got {cap}"
        raise InputError(error_msg)
    classes = np.unique(data.labels)
    per_class = math.ceil(cap / len(classes))
    keep = np.zeros(len(data), dtype=bool)
    for cls in classes:
        keep[np.flatnonzero(data.labels == cls)[:per_class]] = True
    return data.subset(np.flatnonzero(keep)[:cap])


def _open_idx(path: Path) -> bytes:
    candidates = [path, path.with_name(path.name + ".gz")]
    for candidate in candidates:
        if candidate.is_file():
            try:
                raw = candidate.read_bytes()
                return gzip.decompress(raw) if candidate.suffix == ".gz" else raw
            except (OSError, EOFError) as err:
                error_msg = f"Failed to read {candidate}: {err}"
                raise FormatError(error_msg) from err
    error_msg = f"IDX file not found: {path}"
    raise FormatError(error_msg)


def read_idx_images(path: Path) -> Array:
    """Read an IDX3 image file into a uint8 array N×rows×cols."""
    raw = _open_idx(path)
    if len(raw) < 16:
        error_msg = f"{path.name}: truncated header"
        raise FormatError(error_msg)
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        error_msg = f"{path.name}: bad magic number {magic} (expected {IMAGE_MAGIC})"
        raise FormatError(error_msg)
    expected = count * rows * cols
    if len(raw) - 16 != expected:
        error_msg = f"{path.name}: expected {expected} pixel bytes for {count} images, found {len(raw) - 16}"
        raise FormatError(error_msg)
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def read_idx_labels(path: Path) -> Array:
    """Read an IDX1 label file into a uint8 array."""
    raw = _open_idx(path)
    if len(raw) < 8:
        error_msg = f"{path.name}: truncated header"
        raise FormatError(error_msg)
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        error_msg = f"{path.name}: bad magic number {magic} (expected {LABEL_MAGIC})"
        raise FormatError(error_msg)
    if len(raw) - 8 != count:
        error_msg = f"{path.name}: expected {count} labels, found {len(raw) - 8}"
        raise FormatError(error_msg)
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def load_mnist_split(directory: Path, split: Split) -> LabeledImageSet:
    image_name, label_name = MNIST_FILES[split]
    images = read_idx_images(directory / image_name)
    labels = read_idx_labels(directory / label_name)
    if images.shape[0] != labels.shape[0]:
        error_msg = f"{image_name}: {images.shape[0]} images but {label_name} holds {labels.shape[0]} labels"
        raise FormatError(error_msg)
    scaled = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return LabeledImageSet(scaled, labels.astype(np.int64), split)


def load_mnist(directory: Path) -> tuple[LabeledImageSet, LabeledImageSet]:
    """Load the four canonical MNIST IDX files (optionally gzipped) from a directory.

    Args:
        directory: Directory holding train/t10k images and labels

    Returns:
        Tuple of (train set, test set), pixels scaled to [0, 1]

    Raises:
        FormatError: On a bad magic number, truncated file or count mismatch; the message
            names the offending file
    """
    train = load_mnist_split(directory, Split.TRAIN)
    test = load_mnist_split(directory, Split.TEST)
    logger.info(f"Loaded MNIST from {directory}: train N={len(train)}, test N={len(test)}")
    return train, test


def distortions(originals: Array, perturbed: Array) -> tuple[Array, Array]:
    """Per-sample L2 and L∞ norms of `perturbed - originals`, in float64."""
    delta = (perturbed.astype(np.float64) - originals.astype(np.float64)).reshape(originals.shape[0], -1)
    if delta.shape[1] == 0 or delta.shape[0] == 0:
        return np.zeros(delta.shape[0]), np.zeros(delta.shape[0])
    return np.linalg.norm(delta, axis=1), np.abs(delta).max(axis=1)


@dataclass(eq=False)
class AdversarialSet:
    """Paired benign and adversarial samples produced by one attack.

    Attributes:
        originals: Benign images M×C×H×W
        perturbed: Adversarial counterparts, same shape, values in [0, 1]
        true_labels: Ground-truth classes
        predicted_labels: Classes the crafting model assigns to `perturbed`
        target_labels: Intended target class per sample, -1 for untargeted attacks
        attack_tag: Attack that produced the set (`AttackTag` value)
        l2: Per-sample L2 distortion
        linf: Per-sample L∞ distortion
        success: Per-sample success flag
        source_split: Split the originals were drawn from
        model_id: Id of the model the labels were predicted by
        params: Attack parameters, caps and provenance
    """

    originals: Array
    perturbed: Array
    true_labels: Array
    predicted_labels: Array
    target_labels: Array
    attack_tag: str
    l2: Array
    linf: Array
    success: Array
    source_split: Split
    model_id: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.originals = np.ascontiguousarray(self.originals, dtype=np.float32)
        self.perturbed = np.ascontiguousarray(self.perturbed, dtype=np.float32)
        self.true_labels = np.ascontiguousarray(self.true_labels, dtype=np.int64)
        self.predicted_labels = np.ascontiguousarray(self.predicted_labels, dtype=np.int64)
        self.target_labels = np.ascontiguousarray(self.target_labels, dtype=np.int64)
        self.l2 = np.ascontiguousarray(self.l2, dtype=np.float64)
        self.linf = np.ascontiguousarray(self.linf, dtype=np.float64)
        self.success = np.ascontiguousarray(self.success, dtype=bool)
        self.source_split = Split(self.source_split)
        self.validate()

    def __len__(self) -> int:
        return int(self.true_labels.shape[0])

    def validate(self) -> None:
        """Check shapes, pixel range, recorded distortions and success semantics."""
        count = len(self)
        per_sample = (self.predicted_labels, self.target_labels, self.l2, self.linf, self.success)
        if self.originals.shape != self.perturbed.shape or self.originals.shape[0] != count:
            error_msg = f"originals {self.originals.shape} and perturbed {self.perturbed.shape} do not pair up"
            raise InputError(error_msg)
        if any(a.shape != (count,) for a in per_sample):
            error_msg = "per-sample fields do not match the number of samples"
            raise InputError(error_msg)
        _check_unit_range(self.perturbed, "adversarial set")
        l2, linf = distortions(self.originals, self.perturbed)
        if count and (
            np.abs(l2 - self.l2).max() > DISTORTION_TOLERANCE or np.abs(linf - self.linf).max() > DISTORTION_TOLERANCE
        ):
            error_msg = "stored distortions differ from the recomputed norms"
            raise InputError(error_msg)
        if np.any(self.success & (self.predicted_labels == self.true_labels)):
            error_msg = "a sample flagged successful keeps its true label"
            raise InputError(error_msg)

    def select(self, mask: Array) -> AdversarialSet:
        """Subset by boolean mask or index array; params are carried over."""
        return AdversarialSet(
            originals=self.originals[mask],
            perturbed=self.perturbed[mask],
            true_labels=self.true_labels[mask],
            predicted_labels=self.predicted_labels[mask],
            target_labels=self.target_labels[mask],
            attack_tag=self.attack_tag,
            l2=self.l2[mask],
            linf=self.linf[mask],
            success=self.success[mask],
            source_split=self.source_split,
            model_id=self.model_id,
            params=dict(self.params),
        )

    def achieved_histogram(self, class_count: int = 10) -> list[int]:
        """How often each class was the achieved (mis)classification."""
        return np.bincount(self.predicted_labels, minlength=class_count).tolist()  # type: ignore[no-any-return]

    def intended_histogram(self, class_count: int = 10) -> list[int]:
        """How often each class was the intended target; untargeted samples are not counted."""
        targets = self.target_labels[self.target_labels >= 0]
        return np.bincount(targets, minlength=class_count).tolist()  # type: ignore[no-any-return]


@dataclass(eq=False)
class ActivationTraceSet:
    """Dense-layer activation traces with benign (0) / adversarial (1) labels.

    Attributes:
        traces: float32 array M×d, d being the target model's trace width
        labels: 0 for benign, 1 for adversarial
        attack_tag: Attack the adversarial rows come from, or a tag like "benign"
        target_model_id: Id of the model the traces were extracted from
        split: Split of the underlying images
        provenance: Free-form record of how the set was produced
    """

    traces: Array
    labels: Array
    attack_tag: str
    target_model_id: str
    split: Split
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.traces = np.ascontiguousarray(self.traces, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.split = Split(self.split)
        if self.traces.ndim != 2 or self.labels.shape != (self.traces.shape[0],):
            error_msg = f"traces {self.traces.shape} and labels {self.labels.shape} do not pair up"
            raise InputError(error_msg)
        if np.any((self.labels != 0) & (self.labels != 1)):
            error_msg = "trace labels must be 0 (benign) or 1 (adversarial)"
            raise InputError(error_msg)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def width(self) -> int:
        return int(self.traces.shape[1])

    def select(self, indices: Array) -> ActivationTraceSet:
        return ActivationTraceSet(
            self.traces[indices],
            self.labels[indices],
            self.attack_tag,
            self.target_model_id,
            self.split,
            dict(self.provenance),
        )


def _check_trace_compatible(first: ActivationTraceSet, second: ActivationTraceSet) -> None:
    if first.width != second.width:
        error_msg = f"trace width mismatch: {first.width} vs {second.width}"
        raise InputError(error_msg)
    if first.target_model_id != second.target_model_id:
        error_msg = "trace sets come from different target models"
        raise BindingError(error_msg, first.target_model_id, second.target_model_id)


def concatenate_traces(sets: Sequence[ActivationTraceSet], attack_tag: str) -> ActivationTraceSet:
    """Stack trace sets from one target model into a single set."""
    if not sets:
        error_msg = "nothing to concatenate"
        raise InputError(error_msg)
    for other in sets[1:]:
        _check_trace_compatible(sets[0], other)
    return ActivationTraceSet(
        np.concatenate([s.traces for s in sets]),
        np.concatenate([s.labels for s in sets]),
        attack_tag,
        sets[0].target_model_id,
        sets[0].split,
    )


def balanced_merge(benign: ActivationTraceSet, adversarial: ActivationTraceSet, seed: int) -> ActivationTraceSet:
    """Merge benign and adversarial traces into one shuffled 50/50 set.

    The larger class is subsampled uniformly at random to the size of the smaller one; benign
    rows are labelled 0 and adversarial rows 1.

    Args:
        benign: Traces of benign inputs
        adversarial: Traces of adversarial inputs
        seed: Seed fixing the subsample and the row order

    Returns:
        The merged set, tagged with the adversarial set's attack and split

    Raises:
        InputError: If the trace widths differ
        BindingError: If the sets come from different target models
    """
    _check_trace_compatible(benign, adversarial)
    rng = np.random.default_rng(seed)
    count = min(len(benign), len(adversarial))
    benign_rows = np.sort(rng.choice(len(benign), size=count, replace=False))
    adversarial_rows = np.sort(rng.choice(len(adversarial), size=count, replace=False))
    traces = np.concatenate([benign.traces[benign_rows], adversarial.traces[adversarial_rows]])
    labels = np.concatenate([np.zeros(count, dtype=np.int64), np.ones(count, dtype=np.int64)])
    order = rng.permutation(2 * count)
    return ActivationTraceSet(
        traces[order],
        labels[order],
        adversarial.attack_tag,
        adversarial.target_model_id,
        adversarial.split,
        {"benign_rows": len(benign), "adversarial_rows": len(adversarial), "merge_seed": seed},
    )


def save_traces(traces: ActivationTraceSet, path: Path) -> None:
    """Persist a trace set; the file records d, M, attack, target model id and split."""
    metadata = {
        "width": traces.width,
        "count": len(traces),
        "attack_tag": traces.attack_tag,
        "target_model_id": traces.target_model_id,
        "split": traces.split.value,
        "provenance": traces.provenance,
    }
    write_container(path, KIND_TRACES, metadata, {"traces": traces.traces, "labels": traces.labels})


def load_traces(path: Path) -> ActivationTraceSet:
    """Load a trace set written by `save_traces`.

    Raises:
        FormatError: On a bad container, version or checksum, or inconsistent contents
    """
    metadata, arrays = read_container(path, KIND_TRACES)
    try:
        traces = ActivationTraceSet(
            arrays["traces"],
            arrays["labels"],
            metadata["attack_tag"],
            metadata["target_model_id"],
            Split(metadata["split"]),
            metadata.get("provenance", {}),
        )
    except (KeyError, ValueError, InputError) as err:
        error_msg = f"{path}: inconsistent trace file: {err}"
        raise FormatError(error_msg) from err
    if traces.width != metadata["width"] or len(traces) != metadata["count"]:
        error_msg = f"{path}: header does not match the stored traces"
        raise FormatError(error_msg)
    return traces


def save_adversarial_set(adv: AdversarialSet, path: Path) -> None:
    metadata = {
        "attack_tag": adv.attack_tag,
        "source_split": adv.source_split.value,
        "model_id": adv.model_id,
        "params": adv.params,
    }
    arrays = {
        "originals": adv.originals,
        "perturbed": adv.perturbed,
        "true_labels": adv.true_labels,
        "predicted_labels": adv.predicted_labels,
        "target_labels": adv.target_labels,
        "l2": adv.l2,
        "linf": adv.linf,
        "success": adv.success,
    }
    write_container(path, KIND_ADVERSARIAL, metadata, arrays)


def load_adversarial_set(path: Path) -> AdversarialSet:
    """Load an adversarial set, re-checking pixel range, distortions and success flags."""
    metadata, arrays = read_container(path, KIND_ADVERSARIAL)
    try:
        return AdversarialSet(
            attack_tag=metadata["attack_tag"],
            source_split=Split(metadata["source_split"]),
            model_id=metadata["model_id"],
            params=metadata.get("params", {}),
            **arrays,
        )
    except (KeyError, TypeError, ValueError, InputError) as err:
        error_msg = f"{path}: invalid adversarial set: {err}"
        raise FormatError(error_msg) from err
