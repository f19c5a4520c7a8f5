"""Carlini & Wagner L2 optimization with a binary search over the trade-off constant.

The search is generic over the attack objective: anything returning a per-sample hinge and a
per-sample success mask for a candidate batch can be plugged in. The plain targeted and
untargeted attacks live here; the detector-aware variant in `dla_guard.adaptive` reuses
`cw_l2_search` with a two-hinge objective.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Protocol

import numpy as np
from loguru import logger

from .exceptions import InputError
from .models import NetworkModel
from .optim import Adam
from .tensor import Array, Tensor, clamp_min, pick, row_max, tanh

TANH_SCALE = 0.999999
""" Keeps arctanh finite for pixels at exactly 0 or 1 """
UPPER_BOUND_START = 1e10
BOUNDED = 1e9
MASK_OFFSET = 1e4


@dataclass(frozen=True)
class CWParams:
    """C&W L2 settings.

    Attributes:
        max_iterations: Adam steps per binary-search round
        learning_rate: Adam step size on the tanh-space variable
        binary_search_steps: Rounds of the search over the constant c
        initial_const: c in the first round
        confidence: Margin κ the hinge asks for
        batch_size: Samples optimized together
        abort_early: Stop a round once the loss stops improving
    """

    max_iterations: int = 1000
    learning_rate: float = 0.005
    binary_search_steps: int = 9
    initial_const: float = 1e-2
    confidence: float = 0.0
    batch_size: int = 100
    abort_early: bool = True

    def __post_init__(self) -> None:
        if self.max_iterations < 1 or self.binary_search_steps < 1 or self.batch_size < 1:
            error_msg = "C&W iterations, binary-search steps and batch size must be at least 1"
            raise InputError(error_msg)
        if self.learning_rate <= 0 or self.initial_const <= 0 or self.confidence < 0:
            error_msg = "C&W learning rate and initial constant must be positive, confidence non-negative"
            raise InputError(error_msg)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


CW_PRESETS: dict[str, CWParams] = {
    "crafting": CWParams(),
    "appendix-e": CWParams(max_iterations=3000, learning_rate=0.005, binary_search_steps=20, batch_size=100),
    "adaptive-reduced": CWParams(max_iterations=300, learning_rate=0.005, binary_search_steps=20, batch_size=100),
}


class CWObjective(Protocol):
    """Per-sample attack loss over a candidate batch, plus which candidates already succeed."""

    def __call__(self, candidates: Tensor, rows: slice) -> tuple[Tensor, Array]: ...


@dataclass
class CWOutcome:
    """Best (lowest-L2) successful candidate per sample; originals where nothing succeeded."""

    perturbed: Array
    success: Array
    l2: Array
    const: Array


def margin_terms(logits: Tensor, index: Array) -> tuple[Tensor, Tensor]:
    """Logit of class `index[i]` per row, and the largest logit among the other classes."""
    onehot = np.eye(logits.shape[1], dtype=np.float64)[index]
    chosen = pick(logits, index)
    others = row_max(logits - Tensor(onehot * MASK_OFFSET, dtype=logits.dtype))
    return chosen, others


@dataclass
class TargetedHinge:
    """max(max_{i≠t} Z_i − Z_t, −κ); succeeds once Z_t leads by more than κ."""

    model: NetworkModel
    targets: Array
    confidence: float = 0.0

    def __call__(self, candidates: Tensor, rows: slice) -> tuple[Tensor, Array]:
        chosen, others = margin_terms(self.model.forward(candidates), self.targets[rows])
        gap = others - chosen
        return clamp_min(gap, -self.confidence), gap.data < -self.confidence


@dataclass
class MisclassificationHinge:
    """max(Z_y − max_{i≠y} Z_i, −κ); succeeds once another class leads by more than κ."""

    model: NetworkModel
    labels: Array
    confidence: float = 0.0

    def __call__(self, candidates: Tensor, rows: slice) -> tuple[Tensor, Array]:
        chosen, others = margin_terms(self.model.forward(candidates), self.labels[rows])
        gap = chosen - others
        return clamp_min(gap, -self.confidence), gap.data < -self.confidence


def _search_batch(objective: CWObjective, originals: Array, rows: slice, params: CWParams) -> CWOutcome:
    count = originals.shape[0]
    start = np.arctanh((2.0 * originals.astype(np.float64) - 1.0) * TANH_SCALE).astype(originals.dtype)
    reference = Tensor(originals)
    lower = np.zeros(count)
    upper = np.full(count, UPPER_BOUND_START)
    const = np.full(count, params.initial_const)
    best_l2 = np.full(count, np.inf)
    best = originals.copy()
    check_every = max(params.max_iterations // 10, 1)

    for round_index in range(params.binary_search_steps):
        modifier = {"w": start.copy()}
        optimizer = Adam(params.learning_rate)
        round_success = np.zeros(count, dtype=bool)
        previous = np.inf
        for iteration in range(params.max_iterations):
            w = Tensor(modifier["w"], requires_grad=True)
            candidates = tanh(w) * 0.5 + 0.5
            delta = candidates - reference
            squared = (delta * delta).reshape(count, -1).sum(axis=1)
            hinge, success = objective(candidates, rows)
            loss = (squared + hinge * Tensor(const, dtype=hinge.dtype)).sum()
            loss.backward()

            l2 = np.sqrt(squared.data.astype(np.float64))
            improved = success & (l2 < best_l2)
            best_l2[improved] = l2[improved]
            best[improved] = candidates.data[improved]
            round_success |= success

            assert w.grad is not None
            optimizer.step(modifier, {"w": w.grad})
            if params.abort_early and iteration % check_every == 0:
                if loss.item() > previous * 0.9999:
                    break
                previous = loss.item()

        upper = np.where(round_success, np.minimum(upper, const), upper)
        lower = np.where(round_success, lower, np.maximum(lower, const))
        const = np.where(upper < BOUNDED, (lower + upper) / 2.0, const * 10.0)
        logger.debug(
            f"C&W round {round_index + 1}/{params.binary_search_steps}: "
            f"{int(round_success.sum())}/{count} succeeded, mean c={float(const.mean()):.4g}"
        )

    found = np.isfinite(best_l2)
    return CWOutcome(best, found, np.where(found, best_l2, 0.0), const)


def cw_l2_search(objective: CWObjective, originals: Array, params: CWParams) -> CWOutcome:
    """Run the C&W L2 optimization in batches of `params.batch_size`.

    Each binary-search round restarts Adam from the tanh-space image. After a round a
    sample's constant is halved towards the best known bound on success, or multiplied by
    ten while no successful constant is known.

    Args:
        objective: Attack hinge; called with the candidate batch and its row slice
        originals: Benign images in [0, 1]
        params: Search settings

    Returns:
        The lowest-L2 successful candidate per sample; failed samples keep their original
        with `success` False
    """
    if originals.shape[0] == 0:
        empty = np.zeros(0)
        return CWOutcome(originals.copy(), empty.astype(bool), empty, empty)
    parts: list[CWOutcome] = []
    for start in range(0, originals.shape[0], params.batch_size):
        rows = slice(start, min(start + params.batch_size, originals.shape[0]))
        parts.append(_search_batch(objective, originals[rows], rows, params))
    return CWOutcome(
        np.concatenate([p.perturbed for p in parts]),
        np.concatenate([p.success for p in parts]),
        np.concatenate([p.l2 for p in parts]),
        np.concatenate([p.const for p in parts]),
    )


def carlini_wagner_l2(
    model: NetworkModel,
    x: Array,
    labels: Array,
    params: CWParams,
    targets: Array | None = None,
) -> CWOutcome:
    """C&W L2 attack, targeted when `targets` is given, untargeted otherwise.

    Args:
        model: Model under attack
        x: Benign images in [0, 1]
        labels: True classes
        params: Search settings
        targets: Target class per sample; must differ from the true class

    Returns:
        Per-sample outcome; failures are reported in `success`, never raised

    Raises:
        InputError: If a target equals the true class or lies outside the model's classes
    """
    x = np.asarray(x, dtype=model.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    objective: CWObjective
    if targets is None:
        objective = MisclassificationHinge(model, labels, params.confidence)
    else:
        targets = np.asarray(targets, dtype=np.int64)
        if np.any(targets == labels) or np.any((targets < 0) | (targets >= model.class_count)):
            error_msg = "C&W targets must be valid classes different from the true labels"
            raise InputError(error_msg)
        objective = TargetedHinge(model, targets, params.confidence)
    return cw_l2_search(objective, x, params)
