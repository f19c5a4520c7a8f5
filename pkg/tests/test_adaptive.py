"""Tests for the detector-aware C&W attack and the baseline comparison."""

from __future__ import annotations

from dataclasses import replace
from typing import TYPE_CHECKING

import numpy as np
import pytest

from dla_guard.adaptive import AdaptiveResult, SecuredHinge, adaptive_cw, adaptive_report
from dla_guard.carlini import CWParams, MisclassificationHinge
from dla_guard.dla import PolicyMode, VerdictPolicy, secure_classify
from dla_guard.exceptions import BindingError
from dla_guard.tensor import Array, Tensor

if TYPE_CHECKING:
    from collections.abc import Callable

    from conftest import AlarmKit

QUICK = CWParams(max_iterations=30, learning_rate=0.05, binary_search_steps=2, initial_const=1.0, batch_size=10)


def _result(**overrides: object) -> AdaptiveResult:
    values: dict[str, object] = {
        "attempted": 3,
        "baseline_success": np.array([True, True, False]),
        "baseline_l2": np.array([1.0, 3.0, 0.0]),
        "adaptive_success": np.array([True, False, True]),
        "adaptive_l2": np.array([2.0, 0.0, 4.0]),
        "adaptive_claimed": 3,
    }
    values.update(overrides)
    return AdaptiveResult(**values)  # type: ignore[arg-type]


def test_result_statistics() -> None:
    """Means over successes, their ratio and the means over samples both runs broke."""
    result = _result()
    assert result.baseline_rate == pytest.approx(2 / 3)
    assert result.adaptive_rate == pytest.approx(2 / 3)
    assert result.baseline_mean_l2 == pytest.approx(2.0)
    assert result.adaptive_mean_l2 == pytest.approx(3.0)
    assert result.l2_ratio == pytest.approx(1.5)
    assert result.matched_means == (pytest.approx(1.0), pytest.approx(2.0))
    summary = result.to_dict()
    assert summary["baseline_successes"] == 2
    assert summary["adaptive_claimed"] == 3
    assert summary["matched_adaptive_mean_l2"] == pytest.approx(2.0)


def test_result_statistics_when_undefined() -> None:
    """Nothing attempted or nothing broken gives None instead of a number."""
    empty = np.zeros(0)
    nothing = _result(
        attempted=0,
        baseline_success=empty.astype(bool),
        baseline_l2=empty,
        adaptive_success=empty.astype(bool),
        adaptive_l2=empty,
        adaptive_claimed=0,
    )
    assert nothing.baseline_rate is None
    assert nothing.baseline_mean_l2 is None
    assert nothing.l2_ratio is None
    assert nothing.matched_means == (None, None)
    unbroken = _result(adaptive_success=np.zeros(3, dtype=bool))
    assert unbroken.adaptive_rate == 0.0
    assert unbroken.adaptive_mean_l2 is None
    assert unbroken.l2_ratio is None


def test_zero_alarm_weight_is_plain_misclassification(alarm_kit: AlarmKit) -> None:
    """Without the alarm term the objective is the target's misclassification hinge."""
    images = alarm_kit.test.images[:6]
    labels = alarm_kit.test.labels[:6]
    rows = slice(0, 6)
    secured_loss, secured_success = SecuredHinge(alarm_kit.target, alarm_kit.alarm, labels, alarm_weight=0.0)(
        Tensor(images), rows
    )
    plain_loss, plain_success = MisclassificationHinge(alarm_kit.target, labels)(Tensor(images), rows)
    np.testing.assert_array_equal(secured_loss.data, plain_loss.data)
    np.testing.assert_array_equal(secured_success, plain_success)


def test_alarm_term_adds_to_the_hinge(alarm_kit: AlarmKit) -> None:
    """The alarm hinge is never below −κ, so the secured loss is at least the plain one; success needs both."""
    images = alarm_kit.adv_test.perturbed
    labels = alarm_kit.adv_test.true_labels
    rows = slice(0, len(labels))
    secured_loss, secured_success = SecuredHinge(alarm_kit.target, alarm_kit.alarm, labels)(Tensor(images), rows)
    plain_loss, plain_success = MisclassificationHinge(alarm_kit.target, labels)(Tensor(images), rows)
    assert np.all(secured_loss.data >= plain_loss.data - 1e-5)
    assert np.all(plain_success[secured_success])


def test_secured_hinge_gradient_matches_finite_differences(
    alarm_kit: AlarmKit, finite_difference: Callable[..., Array]
) -> None:
    """The combined target and alarm hinge differentiates back to the input through the shared trace.

    A large κ keeps both hinges off their −κ floors, so the objective is smooth at every draw.
    """
    target = alarm_kit.target.astype(np.float64)
    alarm = replace(alarm_kit.alarm, network=alarm_kit.alarm.network.astype(np.float64))
    labels = alarm_kit.test.labels[:4]
    rows = slice(0, len(labels))
    objective = SecuredHinge(target, alarm, labels, confidence=1e3, alarm_weight=0.5)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.1, 0.9, size=(len(labels), *target.input_shape))
        weights = rng.normal(size=len(labels))

        def scalar(point: Array, weights: Array = weights) -> float:
            hinge, _ = objective(Tensor(point, dtype=np.float64), rows)
            return float(hinge.data @ weights)

        inputs = Tensor(x, requires_grad=True, dtype=np.float64)
        hinge, _ = objective(inputs, rows)
        (hinge * Tensor(weights, dtype=np.float64)).sum().backward()
        assert inputs.grad is not None
        np.testing.assert_allclose(inputs.grad, finite_difference(scalar, x), rtol=1e-5, atol=1e-7)


def test_adaptive_cw_reverifies_successes(alarm_kit: AlarmKit) -> None:
    """Reported successes flip the label without raising the alarm."""
    correct = alarm_kit.target.predict(alarm_kit.test.images) == alarm_kit.test.labels
    x = alarm_kit.test.images[correct][:10]
    labels = alarm_kit.test.labels[correct][:10]
    run = adaptive_cw(alarm_kit.target, alarm_kit.alarm, x, labels, QUICK)
    assert run.claimed >= int(run.success.sum())
    verdict = secure_classify(alarm_kit.target, VerdictPolicy(PolicyMode.ANY, [alarm_kit.alarm]), run.perturbed)
    assert np.all(verdict.predicted[run.success] != labels[run.success])
    assert not verdict.flag[run.success].any()
    np.testing.assert_allclose(
        run.l2, np.linalg.norm((run.perturbed - x).reshape(len(x), -1), axis=1), rtol=1e-5, atol=1e-6
    )


def test_adaptive_cw_checks_binding(alarm_kit: AlarmKit) -> None:
    """An alarm bound to another target cannot be attacked together with this one."""
    foreign = replace(alarm_kit.alarm, target_model_id="0000000000000000")
    with pytest.raises(BindingError):
        adaptive_cw(alarm_kit.target, foreign, alarm_kit.test.images[:2], alarm_kit.test.labels[:2], QUICK)


def test_adaptive_report(alarm_kit: AlarmKit) -> None:
    """Both runs attack the same correctly classified images with the same settings."""
    images = alarm_kit.test.subset(np.arange(9))
    result = adaptive_report(alarm_kit.target, alarm_kit.alarm, images, QUICK, alarm_weight=0.5)
    correct = int((alarm_kit.target.predict(images.images) == images.labels).sum())
    assert result.attempted == correct
    assert result.baseline_success.shape == result.adaptive_success.shape == (correct,)
    assert result.params["alarm_weight"] == 0.5
    assert result.params["cw"]["max_iterations"] == 30
    assert result.params["alarm"] == alarm_kit.alarm.attack_tag
