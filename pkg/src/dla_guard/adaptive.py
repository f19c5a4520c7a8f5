"""Detector-aware C&W attack against a target secured by an alarm.

The attacker knows both networks. The C&W L2 search minimizes the squared distortion plus c
times the sum of two hinges: the target's misclassification hinge on its logits, and an
evasion hinge on the alarm's pre-softmax outputs, both taken from one traced forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from loguru import logger

from .carlini import CWParams, carlini_wagner_l2, cw_l2_search, margin_terms
from .datasets import LabeledImageSet, distortions
from .dla import AlarmModel, PolicyMode, TraceLabel, VerdictPolicy, secure_classify
from .models import NetworkModel
from .tensor import Array, Tensor, clamp_min, pick, softmax


@dataclass
class SecuredHinge:
    """Misclassification hinge on the target plus a weighted evasion hinge on the alarm.

    A candidate succeeds when the target's true-class logit trails another class by more than
    κ and, unless the alarm weight is zero, the alarm's adversarial score is at most its
    threshold.
    """

    target: NetworkModel
    alarm: AlarmModel
    labels: Array
    confidence: float = 0.0
    alarm_weight: float = 1.0

    def __call__(self, candidates: Tensor, rows: slice) -> tuple[Tensor, Array]:
        logits, trace = self.target.forward_with_trace(candidates)
        chosen, others = margin_terms(logits, self.labels[rows])
        gap = chosen - others
        hinge = clamp_min(gap, -self.confidence)
        success = gap.data < -self.confidence
        if self.alarm_weight == 0:
            return hinge, success
        alarm_logits = self.alarm.logits(trace)
        count = candidates.shape[0]
        adversarial = pick(alarm_logits, np.full(count, TraceLabel.ADVERSARIAL))
        benign = pick(alarm_logits, np.full(count, TraceLabel.BENIGN))
        evasion = clamp_min(adversarial - benign, -self.confidence)
        evaded = softmax(alarm_logits.data)[:, TraceLabel.ADVERSARIAL] <= self.alarm.threshold
        return hinge + evasion * self.alarm_weight, success & evaded


@dataclass
class AttackRun:
    """Per-sample outcome of one attack run.

    Attributes:
        perturbed: Returned images
        success: Success after independent re-verification
        l2: L2 distortion of `perturbed`
        claimed: Successes the optimizer reported before re-verification
    """

    perturbed: Array
    success: Array
    l2: Array
    claimed: int


def adaptive_cw(
    target: NetworkModel,
    alarm: AlarmModel,
    x: Array,
    labels: Array,
    params: CWParams,
    alarm_weight: float = 1.0,
) -> AttackRun:
    """C&W L2 against the secured pair (target, alarm).

    Every success the optimizer reports is re-checked through `secure_classify`; only samples
    whose label flips without raising the alarm count. With `alarm_weight` 0 the alarm term
    and the alarm check drop out and the run is a plain untargeted C&W on the target.

    Raises:
        InputError: If the alarm reads traces of another width
        BindingError: If the alarm is bound to another target
    """
    alarm.check_binding(target.model_id, target.trace_width)
    x = np.asarray(x, dtype=target.dtype)
    objective = SecuredHinge(target, alarm, labels, params.confidence, alarm_weight)
    outcome = cw_l2_search(objective, x, params)
    verdict = secure_classify(target, VerdictPolicy(PolicyMode.ANY, [alarm]), outcome.perturbed)
    verified = outcome.success & (verdict.predicted != labels)
    if alarm_weight != 0:
        verified &= ~verdict.flag
    l2, _ = distortions(x, outcome.perturbed)
    return AttackRun(outcome.perturbed, verified, l2, int(outcome.success.sum()))


def _mean_or_none(values: Array) -> float | None:
    return float(values.mean()) if values.size else None


def _rate_or_none(success: Array) -> float | None:
    return float(success.mean()) if success.size else None


@dataclass
class AdaptiveResult:
    """Baseline C&W on the bare target against adaptive C&W on the secured target.

    Mean distortions are taken over successful samples only; "matched" means are taken over
    the samples both runs broke. Rates and means are None when undefined.
    """

    attempted: int
    baseline_success: Array
    baseline_l2: Array
    adaptive_success: Array
    adaptive_l2: Array
    adaptive_claimed: int
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def baseline_rate(self) -> float | None:
        return _rate_or_none(self.baseline_success)

    @property
    def adaptive_rate(self) -> float | None:
        return _rate_or_none(self.adaptive_success)

    @property
    def baseline_mean_l2(self) -> float | None:
        return _mean_or_none(self.baseline_l2[self.baseline_success])

    @property
    def adaptive_mean_l2(self) -> float | None:
        return _mean_or_none(self.adaptive_l2[self.adaptive_success])

    @property
    def l2_ratio(self) -> float | None:
        baseline, adaptive = self.baseline_mean_l2, self.adaptive_mean_l2
        if baseline is None or adaptive is None or baseline == 0:
            return None
        return adaptive / baseline

    @property
    def matched_means(self) -> tuple[float | None, float | None]:
        both = self.baseline_success & self.adaptive_success
        return _mean_or_none(self.baseline_l2[both]), _mean_or_none(self.adaptive_l2[both])

    def to_dict(self) -> dict[str, Any]:
        matched_baseline, matched_adaptive = self.matched_means
        return {
            "attempted": self.attempted,
            "baseline_successes": int(self.baseline_success.sum()),
            "baseline_success_rate": self.baseline_rate,
            "baseline_mean_l2": self.baseline_mean_l2,
            "adaptive_successes": int(self.adaptive_success.sum()),
            "adaptive_claimed": self.adaptive_claimed,
            "adaptive_success_rate": self.adaptive_rate,
            "adaptive_mean_l2": self.adaptive_mean_l2,
            "l2_ratio": self.l2_ratio,
            "matched_baseline_mean_l2": matched_baseline,
            "matched_adaptive_mean_l2": matched_adaptive,
            "params": self.params,
        }


def adaptive_report(
    target: NetworkModel,
    alarm: AlarmModel,
    images: LabeledImageSet,
    params: CWParams,
    alarm_weight: float = 1.0,
) -> AdaptiveResult:
    """Attack the same correctly classified images with and without knowledge of the alarm.

    Both runs use identical C&W settings; the baseline is untargeted C&W on the bare target.
    """
    alarm.check_binding(target.model_id, target.trace_width)
    x = images.images.astype(target.dtype)
    labels = images.labels
    correct = target.predict(x) == labels if len(images) else np.zeros(0, dtype=bool)
    x, labels = x[correct], labels[correct]
    logger.info(f"adaptive comparison on {labels.size}/{len(images)} correctly classified images")

    baseline = carlini_wagner_l2(target, x, labels, params)
    baseline_flipped = target.predict(baseline.perturbed) != labels if labels.size else np.zeros(0, dtype=bool)
    baseline_success = baseline.success & baseline_flipped
    baseline_l2, _ = distortions(x, baseline.perturbed)

    adaptive = adaptive_cw(target, alarm, x, labels, params, alarm_weight)
    if adaptive.claimed != int(adaptive.success.sum()):
        logger.warning(f"{adaptive.claimed - int(adaptive.success.sum())} adaptive successes failed re-verification")
    return AdaptiveResult(
        attempted=int(labels.size),
        baseline_success=baseline_success,
        baseline_l2=baseline_l2,
        adaptive_success=adaptive.success,
        adaptive_l2=adaptive.l2,
        adaptive_claimed=adaptive.claimed,
        params={"cw": params.to_dict(), "alarm_weight": alarm_weight, "alarm": alarm.attack_tag},
    )
