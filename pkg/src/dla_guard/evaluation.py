"""Detection metrics, cross-test matrices, control experiments and PCA export.

The positive class is "adversarial" throughout: a true positive is an adversarial trace the
alarm flags, a false positive a benign trace it flags.
"""

from __future__ import annotations

import csv
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from loguru import logger

from .attacks import noise_matched_benign
from .datasets import (
    BENIGN_TAG,
    COMBINED_TAG,
    MISCLASSIFIED_TAG,
    ActivationTraceSet,
    AdversarialSet,
    LabeledImageSet,
    Split,
    balanced_merge,
    concatenate_traces,
)
from .dla import AlarmConfig, AlarmModel, TraceLabel, alarm_classify, extract_features, train_alarm
from .exceptions import BindingError, DLAGuardError, InputError
from .models import NetworkModel
from .tensor import Array

MIN_MISCLASSIFIED = 50


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            error_msg = f"confusion counts must be non-negative: {self}"
            raise InputError(error_msg)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @classmethod
    def from_verdicts(cls, labels: Array, verdicts: Array) -> ConfusionCounts:
        actual = labels == TraceLabel.ADVERSARIAL
        flagged = np.asarray(verdicts, dtype=bool)
        return cls(
            tp=int(np.sum(actual & flagged)),
            tn=int(np.sum(~actual & ~flagged)),
            fp=int(np.sum(~actual & flagged)),
            fn=int(np.sum(actual & ~flagged)),
        )

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def recount(labels: Array, verdicts: Array) -> ConfusionCounts:
    """Sample-by-sample confusion count, used to cross-check the vectorized one."""
    tp = tn = fp = fn = 0
    for label, verdict in zip(labels.tolist(), np.asarray(verdicts, dtype=bool).tolist(), strict=True):
        if label == TraceLabel.ADVERSARIAL:
            tp, fn = (tp + 1, fn) if verdict else (tp, fn + 1)
        else:
            fp, tn = (fp + 1, tn) if verdict else (fp, tn + 1)
    return ConfusionCounts(tp, tn, fp, fn)


@dataclass(frozen=True)
class Metrics:
    """Detection metrics; `undefined` names every ratio whose denominator was zero (reported as 0)."""

    accuracy: float
    precision: float
    recall: float
    f1: float
    fpr: float
    fnr: float
    undefined: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "fpr": self.fpr,
            "fnr": self.fnr,
            "undefined": list(self.undefined),
        }


def _ratio(numerator: int, denominator: int, name: str, undefined: list[str]) -> float:
    if denominator == 0:
        undefined.append(name)
        return 0.0
    return numerator / denominator


def metrics(counts: ConfusionCounts) -> Metrics:
    """Accuracy, precision, recall, f1, fpr and fnr of a confusion count.

    f1 is 0 and flagged undefined when precision or recall is undefined or both are zero.

    Raises:
        InputError: If the counts are empty
    """
    if counts.total == 0:
        error_msg = "metrics need at least one evaluated sample"
        raise InputError(error_msg)
    undefined: list[str] = []
    precision = _ratio(counts.tp, counts.tp + counts.fp, "precision", undefined)
    recall = _ratio(counts.tp, counts.tp + counts.fn, "recall", undefined)
    fpr = _ratio(counts.fp, counts.fp + counts.tn, "fpr", undefined)
    fnr = _ratio(counts.fn, counts.fn + counts.tp, "fnr", undefined)
    if "precision" in undefined or "recall" in undefined or precision + recall == 0:
        undefined.append("f1")
        f1 = 0.0
    else:
        f1 = 2 * precision * recall / (precision + recall)
    accuracy = (counts.tp + counts.tn) / counts.total
    return Metrics(accuracy, precision, recall, f1, fpr, fnr, tuple(undefined))


@dataclass
class EvalReport:
    """One alarm evaluated on one test set.

    Attributes:
        alarm_tag: Attack tag of the alarm
        test_tag: Attack tag of the evaluated traces
        counts: Confusion counts, None when nothing could be evaluated
        metrics: Metrics of `counts`, None when nothing could be evaluated
        warnings: Human-readable caveats (small samples, skipped steps)
        extra: Additional numbers specific to the experiment
    """

    alarm_tag: str
    test_tag: str
    counts: ConfusionCounts | None = None
    metrics: Metrics | None = None
    warnings: list[str] = field(default_factory=list)
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def f1(self) -> float | None:
        return None if self.metrics is None else self.metrics.f1

    def to_dict(self) -> dict[str, Any]:
        return {
            "alarm": self.alarm_tag,
            "test": self.test_tag,
            "counts": None if self.counts is None else self.counts.to_dict(),
            "metrics": None if self.metrics is None else self.metrics.to_dict(),
            "warnings": self.warnings,
            "extra": self.extra,
        }


def evaluate_traces(alarm: AlarmModel, traces: ActivationTraceSet, test_tag: str | None = None) -> EvalReport:
    """Evaluate an alarm on labelled traces as they are, without rebalancing.

    Raises:
        DLAGuardError: If the vectorized and the sample-by-sample counts disagree
    """
    verdicts = alarm_classify(alarm, traces).verdicts
    counts = ConfusionCounts.from_verdicts(traces.labels, verdicts)
    if counts != recount(traces.labels, verdicts):
        error_msg = f"confusion counts of {alarm.attack_tag} disagree with the per-sample recount"
        raise DLAGuardError(error_msg)
    return EvalReport(alarm.attack_tag, test_tag or traces.attack_tag, counts, metrics(counts))


def evaluate_alarm(
    alarm: AlarmModel, benign: ActivationTraceSet, adversarial: ActivationTraceSet, seed: int
) -> EvalReport:
    """Evaluate an alarm on the balanced merge of benign and adversarial test traces."""
    report = evaluate_traces(alarm, balanced_merge(benign, adversarial, seed))
    logger.info(f"alarm {report.alarm_tag} vs {report.test_tag}: f1={report.f1:.4f}")
    return report


def error_rate_summary(reports: Sequence[EvalReport]) -> dict[str, Any]:
    """Mean fpr and fnr over evaluated reports, and whether fnr ≤ fpr on average."""
    measured = [r.metrics for r in reports if r.metrics is not None]
    if not measured:
        return {"alarms": 0, "mean_fpr": None, "mean_fnr": None, "fnr_le_fpr": None}
    mean_fpr = float(np.mean([m.fpr for m in measured]))
    mean_fnr = float(np.mean([m.fnr for m in measured]))
    return {"alarms": len(measured), "mean_fpr": mean_fpr, "mean_fnr": mean_fnr, "fnr_le_fpr": mean_fnr <= mean_fpr}


@dataclass
class CrossTestMatrix:
    """Accuracy and f1 of every alarm (rows) on every attack's test merge (columns)."""

    alarm_tags: list[str]
    test_tags: list[str]
    accuracy: Array
    f1: Array

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.alarm_tags), len(self.test_tags)

    def cell(self, alarm_tag: str, test_tag: str) -> tuple[float, float]:
        row, col = self.alarm_tags.index(alarm_tag), self.test_tags.index(test_tag)
        return float(self.accuracy[row, col]), float(self.f1[row, col])

    def diagonal(self) -> dict[str, float]:
        """f1 of each alarm on the test set of its own attack."""
        return {tag: self.cell(tag, tag)[1] for tag in self.alarm_tags if tag in self.test_tags}

    def alarm_means(self) -> dict[str, float]:
        """Mean f1 of each alarm over all columns."""
        return {tag: float(self.f1[row].mean()) for row, tag in enumerate(self.alarm_tags)}

    def column_means(self) -> dict[str, float | None]:
        """Mean f1 of each column over the alarms not trained on that column's attack."""
        means: dict[str, float | None] = {}
        for col, tag in enumerate(self.test_tags):
            rows = [row for row, alarm in enumerate(self.alarm_tags) if alarm not in (tag, COMBINED_TAG)]
            means[tag] = float(self.f1[rows, col].mean()) if rows else None
        return means


def cross_test(
    target: NetworkModel,
    alarms: Sequence[AlarmModel],
    test_sets: Sequence[tuple[ActivationTraceSet, ActivationTraceSet]],
    seed: int,
) -> CrossTestMatrix:
    """Evaluate every alarm on every attack's balanced test merge and on their union.

    Args:
        target: The target every alarm and trace set must be bound to
        alarms: Dedicated and combined alarms
        test_sets: (benign, adversarial) test-split trace pairs, one per attack
        seed: Seed of the balanced merges

    Raises:
        InputError: If a test set is not from the test split
        BindingError: If an alarm or a trace set belongs to another target
    """
    target_id = target.model_id
    for alarm in alarms:
        alarm.check_binding(target_id, target.trace_width)
    merges: list[ActivationTraceSet] = []
    for benign, adversarial in test_sets:
        for traces in (benign, adversarial):
            if traces.split != Split.TEST:
                error_msg = f"cross-test needs test-split traces, got {traces.attack_tag} from {traces.split}"
                raise InputError(error_msg)
            if traces.target_model_id != target_id:
                error_msg = f"{traces.attack_tag} test traces come from another target"
                raise BindingError(error_msg, target_id, traces.target_model_id)
        merges.append(balanced_merge(benign, adversarial, seed))
    if len(merges) > 1:
        merges.append(concatenate_traces(merges, COMBINED_TAG))
    test_tags = [m.attack_tag for m in merges]
    accuracy = np.zeros((len(alarms), len(merges)))
    f1 = np.zeros((len(alarms), len(merges)))
    for row, alarm in enumerate(alarms):
        for col, merged in enumerate(merges):
            report = evaluate_traces(alarm, merged)
            assert report.metrics is not None
            accuracy[row, col] = report.metrics.accuracy
            f1[row, col] = report.metrics.f1
    return CrossTestMatrix([a.attack_tag for a in alarms], test_tags, accuracy, f1)


def _split_by_correctness(target: NetworkModel, data: LabeledImageSet) -> ActivationTraceSet:
    """Traces labelled 1 where the target misclassifies the benign image, 0 where it is right."""
    traces = target.traces(data.images)
    wrong = (target.predict(data.images) != data.labels).astype(np.int64) if len(data) else np.zeros(0, np.int64)
    return ActivationTraceSet(traces, wrong, MISCLASSIFIED_TAG, target.model_id, data.split)


def misclassification_control(
    target: NetworkModel,
    train: LabeledImageSet,
    test: LabeledImageSet,
    seed: int,
    cfg: AlarmConfig | None = None,
) -> EvalReport:
    """Can an alarm tell the target's ordinary mistakes from its correct answers?

    Trains an alarm on train-split traces of correctly (benign) against incorrectly
    (positive) classified images and evaluates it on the test split's.
    """
    report = EvalReport(MISCLASSIFIED_TAG, MISCLASSIFIED_TAG)
    train_traces = _split_by_correctness(target, train)
    test_traces = _split_by_correctness(target, test)
    for name, traces in (("train", train_traces), ("test", test_traces)):
        wrong = int(traces.labels.sum())
        report.extra[f"{name}_misclassified"] = wrong
        report.extra[f"{name}_correct"] = len(traces) - wrong
        if wrong < MIN_MISCLASSIFIED:
            report.warnings.append(f"only {wrong} misclassified {name} samples (< {MIN_MISCLASSIFIED})")
            logger.warning(f"misclassification control: only {wrong} misclassified {name} samples")
    if not train_traces.labels.any() or not test_traces.labels.any():
        report.warnings.append("no misclassified samples in one split; control not evaluated")
        return report

    def part(traces: ActivationTraceSet, label: int) -> ActivationTraceSet:
        return traces.select(np.flatnonzero(traces.labels == label))

    alarm = train_alarm(part(train_traces, 0), part(train_traces, 1), seed, cfg)
    evaluated = evaluate_alarm(alarm, part(test_traces, 0), part(test_traces, 1), seed)
    report.counts, report.metrics = evaluated.counts, evaluated.metrics
    return report


def noise_control_eval(
    alarm: AlarmModel,
    target: NetworkModel,
    noisy_benign: LabeledImageSet,
    adv_test: AdversarialSet,
) -> EvalReport:
    """Re-evaluate an alarm with noise-matched benign images added to the negatives.

    The clean evaluation uses the adversarial set's originals as negatives; the noisy one
    adds `noisy_benign` to them. Neither is rebalanced, so every noisy image counts as a
    negative.
    """
    clean = extract_features(target, adv_test.originals, TraceLabel.BENIGN, BENIGN_TAG, adv_test.source_split)
    noisy = extract_features(target, noisy_benign.images, TraceLabel.BENIGN, BENIGN_TAG, noisy_benign.split)
    adversarial = extract_features(
        target, adv_test.perturbed, TraceLabel.ADVERSARIAL, adv_test.attack_tag, adv_test.source_split
    )
    clean_report = evaluate_traces(alarm, concatenate_traces([clean, adversarial], adv_test.attack_tag))
    report = evaluate_traces(alarm, concatenate_traces([clean, noisy, adversarial], adv_test.attack_tag))
    report.extra = {
        "clean_f1": clean_report.f1,
        "noisy_f1": report.f1,
        "f1_drop": (clean_report.f1 or 0.0) - (report.f1 or 0.0),
        "noisy_samples": len(noisy),
    }
    return report


def noise_controls_for(alarm: AlarmModel, target: NetworkModel, adv_test: AdversarialSet, seed: int) -> EvalReport:
    """Build noise-matched benign images for `adv_test` and run `noise_control_eval`."""
    noisy = noise_matched_benign(target, adv_test, seed)
    return noise_control_eval(alarm, target, noisy, adv_test)


@dataclass
class PCAProjection:
    """Principal-component view of a trace set.

    Attributes:
        coordinates: M×k projections onto the leading components
        components: k×d orthonormal component vectors, by decreasing variance
        explained_variance: Variance along each component
        explained_variance_ratio: Share of the total variance along each component
        mean: Per-feature mean removed before projecting
        labels: Benign (0) / adversarial (1) label per row
    """

    coordinates: Array
    components: Array
    explained_variance: Array
    explained_variance_ratio: Array
    mean: Array
    labels: Array

    def reconstruct(self) -> Array:
        return self.coordinates @ self.components + self.mean  # type: ignore[no-any-return]


def pca_project(traces: ActivationTraceSet, k: int) -> PCAProjection:
    """Mean-centred PCA through an eigendecomposition of the sample covariance.

    Each component's sign is fixed so that its largest-magnitude entry is positive. A single
    trace has zero covariance: its coordinates and variances are all zero and the components
    are still an orthonormal set.

    Raises:
        InputError: If k is not in [1, min(M, d)]
    """
    count, width = traces.traces.shape
    if k < 1 or k > width:
        error_msg = f"k must lie in [1, {width}], got {k}"
        raise InputError(error_msg)
    if count < k:
        error_msg = f"PCA with k={k} needs at least {k} traces, got {count}"
        raise InputError(error_msg)
    data = traces.traces.astype(np.float64)
    mean = data.mean(axis=0)
    centered = data - mean
    covariance = centered.T @ centered / max(count - 1, 1)
    values, vectors = np.linalg.eigh(covariance)
    order = np.argsort(values)[::-1][:k]
    values = np.clip(values[order], 0.0, None)
    components = vectors[:, order].T
    signs = np.sign(components[np.arange(k), np.abs(components).argmax(axis=1)])
    components *= np.where(signs == 0, 1.0, signs)[:, None]
    total = float(np.clip(np.linalg.eigvalsh(covariance), 0.0, None).sum())
    ratio = values / total if total > 0 else np.zeros(k)
    return PCAProjection(centered @ components.T, components, values, ratio, mean, traces.labels.copy())


def write_pca_coordinates(projection: PCAProjection, path: Path) -> None:
    """Write the projection as CSV: index, label, pc1..pck."""
    k = projection.components.shape[0]
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["index", "label", *[f"pc{i + 1}" for i in range(k)]])
        for index, (label, row) in enumerate(zip(projection.labels, projection.coordinates, strict=True)):
            writer.writerow([index, int(label), *[f"{value:.8g}" for value in row]])
