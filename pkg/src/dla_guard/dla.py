"""Dense-layer analysis: trace extraction, alarm training and secure operation.

An alarm is a small binary classifier over the activation traces of one target model. Once
trained, `secure_classify` runs the target once per batch, takes the class prediction from
its logits and feeds the same trace to every alarm of a `VerdictPolicy`.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import IntEnum, StrEnum
from pathlib import Path
from typing import Any

import numpy as np
from loguru import logger

from .container import KIND_ALARM
from .datasets import (
    BENIGN_TAG,
    COMBINED_TAG,
    ActivationTraceSet,
    AdversarialSet,
    LabeledImageSet,
    Split,
    balanced_merge,
    concatenate_traces,
)
from .exceptions import BindingError, FormatError, InputError
from .models import (
    INFERENCE_BATCH,
    NetworkModel,
    OptimizerKind,
    TrainConfig,
    build_alarm_network,
    fit,
    load_stored_model,
    save_model,
)
from .tensor import Array, Tensor, softmax

DEFAULT_THRESHOLD = 0.5
STD_FLOOR = 1e-6


class TraceLabel(IntEnum):
    BENIGN = 0
    ADVERSARIAL = 1


class PolicyMode(StrEnum):
    ANY = "any"
    MAJORITY = "majority"
    ALL = "all"


@dataclass(frozen=True)
class AlarmConfig:
    """Alarm training and decision settings.

    Attributes:
        epochs: Training epochs
        batch_size: Samples per Adam step
        learning_rate: Adam step size
        standardize: Scale traces to zero mean and unit variance before the alarm network
        threshold: Score above which a trace is flagged adversarial
    """

    epochs: int = 10
    batch_size: int = 100
    learning_rate: float = 1e-3
    standardize: bool = False
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            error_msg = f"alarm threshold must lie in [0, 1], got {self.threshold}"
            raise InputError(error_msg)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            optimizer=OptimizerKind.ADAM,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=seed,
        )


@dataclass
class AlarmModel:
    """A trained alarm bound to one target model's trace layout.

    Attributes:
        network: Binary classifier over traces; class 1 is "adversarial"
        attack_tag: Attack the alarm was trained on, or "combined"
        source_tags: Attack tags of every adversarial set used in training
        target_model_id: Id of the target whose traces the alarm reads
        epochs: Training epochs
        batch_size: Training batch size
        seed: Training seed
        threshold: Decision threshold on the adversarial score
        mean: Per-feature trace mean when standardization is on
        std: Per-feature trace standard deviation when standardization is on
        history: Per-epoch [epoch, loss, accuracy] rows
        provenance: Run configuration stamp (config hash, seed, inputs)
    """

    network: NetworkModel
    attack_tag: str
    source_tags: list[str]
    target_model_id: str
    epochs: int
    batch_size: int
    seed: int
    threshold: float = DEFAULT_THRESHOLD
    mean: Array | None = None
    std: Array | None = None
    history: list[list[Any]] = field(default_factory=list)
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def trace_width(self) -> int:
        return self.network.input_shape[0]

    def features(self, traces: Tensor) -> Tensor:
        """Network input for a trace batch, standardized if the alarm was trained that way."""
        if self.mean is None or self.std is None:
            return traces
        return (traces - Tensor(self.mean, dtype=traces.dtype)) * Tensor(1.0 / self.std, dtype=traces.dtype)

    def logits(self, traces: Tensor) -> Tensor:
        """Pre-softmax alarm outputs [benign, adversarial]; differentiable back to the trace."""
        return self.network.forward(self.features(traces))

    def probabilities(self, traces: Array) -> Array:
        if traces.shape[0] == 0:
            return np.zeros((0, 2))
        return softmax(self.logits(Tensor(traces, dtype=self.network.dtype)).data)

    def scores(self, traces: Array) -> Array:
        """Probability of class "adversarial" per trace, float64."""
        return self.probabilities(traces)[:, TraceLabel.ADVERSARIAL]

    def check_binding(self, target_model_id: str, width: int) -> None:
        """Raise unless the alarm reads traces of this target and width."""
        if width != self.trace_width:
            error_msg = f"trace width {width} does not match the alarm's {self.trace_width}"
            raise InputError(error_msg)
        if target_model_id != self.target_model_id:
            error_msg = (
                f"alarm {self.attack_tag} is bound to target {self.target_model_id}, not {target_model_id}"
            )
            raise BindingError(error_msg, self.target_model_id, target_model_id)


def extract_features(
    target: NetworkModel,
    images: Array,
    label: TraceLabel,
    attack_tag: str,
    split: Split,
) -> ActivationTraceSet:
    """One activation trace per image; the target's classification output is discarded.

    Raises:
        InputError: If the images do not have the target's input shape
    """
    if images.shape[1:] != target.input_shape:
        error_msg = f"images of shape {images.shape[1:]} do not fit the target input {target.input_shape}"
        raise InputError(error_msg)
    traces = target.traces(images)
    labels = np.full(traces.shape[0], int(label), dtype=np.int64)
    logger.debug(f"extracted {traces.shape[0]} {TraceLabel(label).name.lower()} traces for {attack_tag}")
    return ActivationTraceSet(traces, labels, attack_tag, target.model_id, split)


def extract_benign(target: NetworkModel, data: LabeledImageSet, attack_tag: str = BENIGN_TAG) -> ActivationTraceSet:
    return extract_features(target, data.images, TraceLabel.BENIGN, attack_tag, data.split)


def extract_adversarial(target: NetworkModel, adv: AdversarialSet) -> ActivationTraceSet:
    """Traces of an adversarial set; the set must have been judged against `target`."""
    if adv.model_id != target.model_id:
        error_msg = f"{adv.attack_tag} set was evaluated on another model"
        raise BindingError(error_msg, target.model_id, adv.model_id)
    return extract_features(target, adv.perturbed, TraceLabel.ADVERSARIAL, adv.attack_tag, adv.source_split)


def _check_train_split(*sets: ActivationTraceSet) -> None:
    for traces in sets:
        if traces.split != Split.TRAIN:
            error_msg = f"alarms train on train-split traces, got {traces.attack_tag} from {traces.split}"
            raise InputError(error_msg)


def _fit_alarm(
    merged: ActivationTraceSet, attack_tag: str, source_tags: list[str], seed: int, cfg: AlarmConfig
) -> AlarmModel:
    if len(merged) == 0:
        error_msg = f"no traces to train the {attack_tag} alarm on"
        raise InputError(error_msg)
    train_cfg = cfg.train_config(seed)
    features = merged.traces.astype(np.float32)
    mean = std = None
    if cfg.standardize:
        mean = features.mean(axis=0)
        std = np.maximum(features.std(axis=0), STD_FLOOR).astype(np.float32)
        features = ((features - mean) / std).astype(np.float32)
    network = build_alarm_network(merged.width, seed)
    logger.info(f"training {attack_tag} alarm on {len(merged)} traces of width {merged.width}")
    log = fit(network, features, merged.labels, train_cfg)
    return AlarmModel(
        network=network,
        attack_tag=attack_tag,
        source_tags=source_tags,
        target_model_id=merged.target_model_id,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=seed,
        threshold=cfg.threshold,
        mean=mean,
        std=std,
        history=log.to_rows(),
    )


def train_alarm(
    benign: ActivationTraceSet,
    adversarial: ActivationTraceSet,
    seed: int,
    cfg: AlarmConfig | None = None,
) -> AlarmModel:
    """Train a dedicated alarm on a balanced merge of benign and adversarial traces.

    Args:
        benign: Train-split traces of benign images
        adversarial: Train-split traces of one attack's examples
        seed: Seed of the merge, the initialization and the shuffle
        cfg: Training settings; 10 epochs of Adam with batch 100 by default

    Returns:
        The trained alarm

    Raises:
        InputError: On a trace-width mismatch, a non-train split or an empty merge
        BindingError: If the sets come from different target models
        TrainingError: If training diverges
    """
    cfg = cfg or AlarmConfig()
    _check_train_split(benign, adversarial)
    merged = balanced_merge(benign, adversarial, seed)
    return _fit_alarm(merged, adversarial.attack_tag, [adversarial.attack_tag], seed, cfg)


def train_combined_alarm(
    pairs: Sequence[tuple[ActivationTraceSet, ActivationTraceSet]],
    seed: int,
    cfg: AlarmConfig | None = None,
) -> AlarmModel:
    """Train one alarm on every attack's traces at once.

    All adversarial sets are stacked; the benign sets (each counted once) are stacked and,
    when fewer than the adversarial rows, resampled with replacement so the merge stays 50/50.
    A single pair trains exactly like `train_alarm` and is only retagged.
    """
    cfg = cfg or AlarmConfig()
    if not pairs:
        error_msg = "a combined alarm needs at least one (benign, adversarial) pair"
        raise InputError(error_msg)
    _check_train_split(*[traces for pair in pairs for traces in pair])
    source_tags = [adv.attack_tag for _, adv in pairs]
    if len(pairs) == 1:
        alarm = train_alarm(pairs[0][0], pairs[0][1], seed, cfg)
        alarm.attack_tag = COMBINED_TAG
        return alarm

    unique_benign: dict[int, ActivationTraceSet] = {}
    for benign, _ in pairs:
        unique_benign.setdefault(id(benign), benign)
    benign_all = concatenate_traces(list(unique_benign.values()), BENIGN_TAG)
    adversarial_all = concatenate_traces([adv for _, adv in pairs], COMBINED_TAG)
    if 0 < len(benign_all) < len(adversarial_all):
        rows = np.random.default_rng([seed, 1]).choice(len(benign_all), size=len(adversarial_all), replace=True)
        benign_all = benign_all.select(rows)
    merged = balanced_merge(benign_all, adversarial_all, seed)
    return _fit_alarm(merged, COMBINED_TAG, source_tags, seed, cfg)


@dataclass
class AlarmVerdicts:
    scores: Array
    verdicts: Array


def alarm_classify(alarm: AlarmModel, traces: ActivationTraceSet) -> AlarmVerdicts:
    """Adversarial score per trace and the verdict score > threshold.

    Raises:
        InputError: On a trace-width mismatch
        BindingError: If the traces come from another target model
    """
    alarm.check_binding(traces.target_model_id, traces.width)
    scores = alarm.scores(traces.traces)
    return AlarmVerdicts(scores, scores > alarm.threshold)


@dataclass
class VerdictPolicy:
    """How the verdicts of several alarms combine into one attack flag."""

    mode: PolicyMode
    alarms: list[AlarmModel]

    def __post_init__(self) -> None:
        try:
            self.mode = PolicyMode(self.mode)
        except ValueError as err:
            error_msg = f"unknown policy mode {self.mode!r}; choose any, majority or all"
            raise InputError(error_msg) from err
        if not self.alarms:
            error_msg = "a verdict policy needs at least one alarm"
            raise InputError(error_msg)

    def combine(self, verdicts: Array) -> Array:
        """Flag per sample from an alarms × samples verdict matrix; majority is strictly more than half."""
        if self.mode == PolicyMode.ANY:
            return verdicts.any(axis=0)  # type: ignore[no-any-return]
        if self.mode == PolicyMode.ALL:
            return verdicts.all(axis=0)  # type: ignore[no-any-return]
        return verdicts.sum(axis=0) * 2 > verdicts.shape[0]  # type: ignore[no-any-return]


@dataclass
class SecureVerdict:
    """Outcome of secured classification.

    Attributes:
        predicted: The target's class per sample, exactly as without alarms
        flag: Attack flag per sample under the policy
        scores: Adversarial score per alarm and sample
    """

    predicted: Array
    flag: Array
    scores: Array


def secure_classify(target: NetworkModel, policy: VerdictPolicy, x: Array) -> SecureVerdict:
    """Classify with the target and flag suspected attacks.

    Each batch runs one traced forward pass; its logits give the prediction and its trace
    feeds every alarm of the policy.

    Raises:
        InputError: If an alarm expects another trace width
        BindingError: If an alarm is bound to another target
    """
    target_id = target.model_id
    for alarm in policy.alarms:
        alarm.check_binding(target_id, target.trace_width)
    count = x.shape[0]
    predicted = np.zeros(count, dtype=np.int64)
    scores = np.zeros((len(policy.alarms), count))
    for start in range(0, count, INFERENCE_BATCH):
        rows = slice(start, min(start + INFERENCE_BATCH, count))
        logits, trace = target.forward_with_trace(Tensor(x[rows], dtype=target.dtype))
        predicted[rows] = logits.data.argmax(axis=1)
        for index, alarm in enumerate(policy.alarms):
            scores[index, rows] = alarm.scores(trace.data)
    verdicts = scores > np.array([[alarm.threshold] for alarm in policy.alarms])
    return SecureVerdict(predicted, policy.combine(verdicts), scores)


def save_alarm(alarm: AlarmModel, path: Path) -> None:
    extra = {
        "attack_tag": alarm.attack_tag,
        "source_tags": alarm.source_tags,
        "target_model_id": alarm.target_model_id,
        "epochs": alarm.epochs,
        "batch_size": alarm.batch_size,
        "seed": alarm.seed,
        "threshold": alarm.threshold,
        "history": alarm.history,
        "provenance": alarm.provenance,
    }
    aux = {} if alarm.mean is None or alarm.std is None else {"mean": alarm.mean, "std": alarm.std}
    save_model(alarm.network, path, extra=extra, aux=aux, kind=KIND_ALARM)


def load_alarm(path: Path) -> AlarmModel:
    """Load an alarm written by `save_alarm`.

    Raises:
        FormatError: On a bad container or missing alarm metadata
    """
    stored = load_stored_model(path, kind=KIND_ALARM)
    extra = stored.extra
    try:
        return AlarmModel(
            network=stored.model,
            attack_tag=extra["attack_tag"],
            source_tags=list(extra["source_tags"]),
            target_model_id=extra["target_model_id"],
            epochs=int(extra["epochs"]),
            batch_size=int(extra["batch_size"]),
            seed=int(extra["seed"]),
            threshold=float(extra["threshold"]),
            mean=stored.aux.get("mean"),
            std=stored.aux.get("std"),
            history=extra.get("history", []),
            provenance=extra.get("provenance", {}),
        )
    except KeyError as err:
        error_msg = f"{path}: missing alarm metadata {err}"
        raise FormatError(error_msg) from err
