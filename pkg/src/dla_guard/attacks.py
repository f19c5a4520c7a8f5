"""White-box evasion attacks, success filtering, transfer sets and noise-matched controls.

Every attack works on numpy image batches in [0, 1] and returns numpy arrays in the same
range. Gradients come from `dla_guard.tensor.input_gradient`, so the model's parameters are
never touched. Randomized steps draw from `numpy.random.default_rng([seed, sample_index])`,
which makes each sample's result independent of how the data is batched.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields
from enum import StrEnum
from typing import Any, Protocol

import numpy as np
from loguru import logger

from .carlini import CWParams, carlini_wagner_l2
from .datasets import L2_ATTACKS, AdversarialSet, AttackTag, LabeledImageSet, distortions
from .exceptions import BindingError, InputError
from .models import NetworkModel
from .tensor import Array, CrossEntropyLoss, LogitLoss, input_gradient, iter_batches

UNTARGETED = -1


class AttackKind(StrEnum):
    FGSM = "fgsm"
    BIM = "bim"
    PGD = "pgd"
    DEEPFOOL = "deepfool"
    CW = "cw"

    @property
    def tag(self) -> AttackTag:
        return {
            AttackKind.FGSM: AttackTag.FGSM,
            AttackKind.BIM: AttackTag.BIM,
            AttackKind.PGD: AttackTag.PGD,
            AttackKind.DEEPFOOL: AttackTag.DEEPFOOL,
            AttackKind.CW: AttackTag.CW,
        }[self]

    @property
    def supports_targets(self) -> bool:
        return self in (AttackKind.BIM, AttackKind.PGD, AttackKind.CW)


class TargetPolicy(StrEnum):
    UNTARGETED = "untargeted"
    CYCLE = "cycle-false-classes"


@dataclass(frozen=True)
class AttackConfig:
    """Settings for one crafting run.

    Attributes:
        kind: Attack algorithm
        epsilon: L∞ budget for FGSM, BIM and PGD, in pixel units
        step_size: Per-iteration step α for BIM and PGD
        iterations: BIM/PGD iteration count
        random_start: Start PGD at a uniform point of the ε-ball
        deepfool_iterations: DeepFool iteration cap
        overshoot: DeepFool overshoot η
        cw: C&W L2 settings
        policy: How target classes are assigned to targeted-capable attacks
        seed: Base seed of the per-sample random streams
        batch_size: Samples per gradient batch for the gradient-sign attacks and DeepFool
    """

    kind: AttackKind = AttackKind.FGSM
    epsilon: float = 0.3
    step_size: float = 0.01
    iterations: int = 40
    random_start: bool = True
    deepfool_iterations: int = 50
    overshoot: float = 0.02
    cw: CWParams = field(default_factory=CWParams)
    policy: TargetPolicy = TargetPolicy.UNTARGETED
    seed: int = 0
    batch_size: int = 100

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "kind", AttackKind(self.kind))
            object.__setattr__(self, "policy", TargetPolicy(self.policy))
        except ValueError as err:
            error_msg = f"unknown attack setting: {err}"
            raise InputError(error_msg) from err
        if self.kind in (AttackKind.FGSM, AttackKind.BIM, AttackKind.PGD) and self.epsilon <= 0:
            error_msg = f"epsilon must be positive for {self.kind}, got {self.epsilon}"
            raise InputError(error_msg)
        if self.kind in (AttackKind.BIM, AttackKind.PGD) and not 0 < self.step_size <= self.epsilon:
            error_msg = f"step size must lie in (0, epsilon], got {self.step_size}"
            raise InputError(error_msg)
        if self.iterations < 1 or self.deepfool_iterations < 1 or self.batch_size < 1:
            error_msg = "iteration counts and batch size must be at least 1"
            raise InputError(error_msg)

    @property
    def targeted(self) -> bool:
        return self.policy == TargetPolicy.CYCLE and self.kind.supports_targets

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["kind"] = self.kind.value
        data["policy"] = self.policy.value
        return data

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> AttackConfig:
        """Build from a config-file table; a nested `cw` table overrides C&W settings."""
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            error_msg = f"unknown attack settings: {', '.join(sorted(unknown))}"
            raise InputError(error_msg)
        values = dict(mapping)
        if "cw" in values and not isinstance(values["cw"], CWParams):
            try:
                values["cw"] = CWParams(**values["cw"])
            except TypeError as err:
                error_msg = f"invalid C&W settings: {err}"
                raise InputError(error_msg) from err
        return cls(**values)


def _clip(x: Array) -> Array:
    return np.clip(x, 0.0, 1.0)


def fgsm(model: NetworkModel, x: Array, labels: Array, epsilon: float) -> Array:
    """x′ = clip(x + ε·sign(∂loss/∂x)) with the summed cross-entropy against the true labels."""
    grad = input_gradient(model, x, CrossEntropyLoss(labels, reduction="sum"))
    return _clip(x + np.float32(epsilon) * np.sign(grad)).astype(x.dtype)


def _iterate_sign_steps(
    model: NetworkModel,
    x: Array,
    start: Array,
    labels: Array,
    epsilon: float,
    step_size: float,
    iterations: int,
    targets: Array | None,
) -> Array:
    """Signed-gradient steps projected onto the ε-ball around `x` and onto [0, 1].

    Untargeted runs ascend the loss of the true labels; targeted runs descend the loss of the
    targets.
    """
    low = x - np.float32(epsilon)
    high = x + np.float32(epsilon)
    step = np.float32(step_size)
    adv = start.copy()
    for _ in range(iterations):
        if targets is None:
            adv = adv + step * np.sign(input_gradient(model, adv, CrossEntropyLoss(labels, reduction="sum")))
        else:
            adv = adv - step * np.sign(input_gradient(model, adv, CrossEntropyLoss(targets, reduction="sum")))
        adv = _clip(np.clip(adv, low, high)).astype(x.dtype)
    return adv


def bim(
    model: NetworkModel,
    x: Array,
    labels: Array,
    epsilon: float,
    step_size: float,
    iterations: int,
    targets: Array | None = None,
) -> Array:
    """Basic iterative method starting at the benign image."""
    return _iterate_sign_steps(model, x, x, labels, epsilon, step_size, iterations, targets)


def pgd(
    model: NetworkModel,
    x: Array,
    labels: Array,
    epsilon: float,
    step_size: float,
    iterations: int,
    random_start: bool = True,
    seed: int = 0,
    sample_ids: Array | None = None,
    targets: Array | None = None,
) -> Array:
    """Projected gradient descent; with `random_start` each sample starts at x + U(−ε, ε).

    Args:
        sample_ids: Global index of each row, seeding its random stream together with `seed`;
            defaults to the row position
    """
    start = x
    if random_start and x.shape[0]:
        ids = np.arange(x.shape[0]) if sample_ids is None else sample_ids
        noise = np.stack(
            [np.random.default_rng([seed, int(i)]).uniform(-epsilon, epsilon, size=x.shape[1:]) for i in ids]
        )
        start = _clip(x + noise.astype(x.dtype)).astype(x.dtype)
    return _iterate_sign_steps(model, x, start, labels, epsilon, step_size, iterations, targets)


def deepfool(
    model: NetworkModel,
    x: Array,
    labels: Array,
    max_iterations: int = 50,
    overshoot: float = 0.02,
) -> Array:
    """Multiclass DeepFool over a batch.

    Each step linearizes the logits around the current point, moves towards the closest
    linearized boundary by (|f̂_l| / ‖w_l‖²)·w_l and stops a sample once its label flips. A
    sample whose gradient differences all vanish stops where it is. Inputs that are already
    misclassified come back unchanged.

    Returns:
        clip(x + (1 + η)·r_total)
    """
    classes = model.class_count
    count = x.shape[0]
    total = np.zeros(x.shape, dtype=np.float64)
    active = model.predict(x) == labels if count else np.zeros(0, dtype=bool)
    for _ in range(max_iterations):
        current = _clip(x + (1.0 + overshoot) * total).astype(x.dtype)
        if active.any():
            flipped = model.predict(current[active]) != labels[active]
            active[np.flatnonzero(active)[flipped]] = False
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        points = current[rows]
        logits = model.logits(points).astype(np.float64)
        grads = np.stack(
            [
                input_gradient(model, points, LogitLoss.for_class(rows.size, classes, k)).astype(np.float64)
                for k in range(classes)
            ]
        )
        flat_grads = grads.reshape(classes, rows.size, -1)
        for position, row in enumerate(rows):
            label = labels[row]
            others = [k for k in range(classes) if k != label]
            w = flat_grads[others, position] - flat_grads[label, position]
            f = logits[position, others] - logits[position, label]
            norms = np.linalg.norm(w, axis=1)
            usable = norms > 0
            if not usable.any():
                active[row] = False
                continue
            ratios = np.where(usable, np.abs(f) / np.where(usable, norms, 1.0), np.inf)
            best = int(np.argmin(ratios))
            step = (abs(f[best]) / norms[best] ** 2) * w[best]
            total[row] += step.reshape(x.shape[1:])
    return _clip(x + (1.0 + overshoot) * total).astype(x.dtype)


def assign_targets(labels: Array, class_count: int) -> Array:
    """Round-robin over the false classes, with a separate counter per true class."""
    counters = np.zeros(class_count, dtype=np.int64)
    targets = np.empty(labels.shape[0], dtype=np.int64)
    for i, label in enumerate(labels):
        false_classes = [c for c in range(class_count) if c != label]
        targets[i] = false_classes[counters[label] % len(false_classes)]
        counters[label] += 1
    return targets


def _run_attack(
    model: NetworkModel, x: Array, labels: Array, targets: Array | None, ids: Array, cfg: AttackConfig
) -> Array:
    if cfg.kind == AttackKind.FGSM:
        return fgsm(model, x, labels, cfg.epsilon)
    if cfg.kind == AttackKind.BIM:
        return bim(model, x, labels, cfg.epsilon, cfg.step_size, cfg.iterations, targets)
    if cfg.kind == AttackKind.PGD:
        return pgd(
            model, x, labels, cfg.epsilon, cfg.step_size, cfg.iterations, cfg.random_start, cfg.seed, ids, targets
        )
    if cfg.kind == AttackKind.DEEPFOOL:
        return deepfool(model, x, labels, cfg.deepfool_iterations, cfg.overshoot)
    return carlini_wagner_l2(model, x, labels, cfg.cw, targets).perturbed


def craft_set(model: NetworkModel, data: LabeledImageSet, cfg: AttackConfig) -> AdversarialSet:
    """Attack every correctly classified sample and keep the ones whose label flips.

    Under the cycle policy BIM, PGD and C&W aim at false classes in round-robin order; FGSM
    and DeepFool always run untargeted. Success means the crafting model's label of the
    perturbed image differs from the true label.

    Args:
        model: The crafting (target) model
        data: Benign images of one split
        cfg: Attack settings

    Returns:
        The successful samples only, with per-sample distortions and a params record of the
        configuration and the attempted, attacked and successful counts
    """
    x = data.images.astype(model.dtype)
    labels = data.labels
    correct = model.predict(x) == labels if len(data) else np.zeros(0, dtype=bool)
    targets = assign_targets(labels, model.class_count) if cfg.targeted else np.full(len(data), UNTARGETED)
    perturbed = x.copy()

    attacked = np.flatnonzero(correct)
    batch_size = cfg.cw.batch_size if cfg.kind == AttackKind.CW else cfg.batch_size
    for batch in iter_batches(attacked.size, batch_size):
        rows = attacked[batch]
        perturbed[rows] = _run_attack(
            model, x[rows], labels[rows], targets[rows] if cfg.targeted else None, rows, cfg
        )
        logger.debug(f"{cfg.kind}: attacked {batch.stop}/{attacked.size} samples")

    predicted = model.predict(perturbed) if len(data) else np.zeros(0, dtype=np.int64)
    success = correct & (predicted != labels)
    l2, linf = distortions(x, perturbed)
    params = {
        "attack": cfg.to_dict(),
        "attempted": len(data),
        "attacked": int(attacked.size),
        "successful": int(success.sum()),
        "success_rate": float(success.sum() / attacked.size) if attacked.size else None,
    }
    full = AdversarialSet(
        originals=x,
        perturbed=perturbed,
        true_labels=labels,
        predicted_labels=predicted,
        target_labels=targets,
        attack_tag=cfg.kind.tag.value,
        l2=l2,
        linf=linf,
        success=success,
        source_split=data.split,
        model_id=model.model_id,
        params=params,
    )
    adv = full.select(success)
    if len(adv) == 0:
        logger.warning(f"{cfg.kind} produced no successful adversarial examples on {len(data)} {data.split} samples")
    else:
        logger.info(f"{cfg.kind} on {data.split}: {len(adv)}/{attacked.size} attacked samples flipped")
    return adv


class Predictor(Protocol):
    @property
    def model_id(self) -> str: ...

    def predict(self, x: Array) -> Array: ...


def transfer_set(source: Predictor, victim: Predictor, adv: AdversarialSet) -> AdversarialSet:
    """Replay a set crafted on `source` against `victim`, keeping what the victim misclassifies.

    Raises:
        BindingError: If `adv` was not crafted on `source`
    """
    if adv.model_id != source.model_id:
        error_msg = "adversarial set was crafted on a different source model"
        raise BindingError(error_msg, source.model_id, adv.model_id)
    predicted = victim.predict(adv.perturbed) if len(adv) else np.zeros(0, dtype=np.int64)
    fooled = predicted != adv.true_labels
    params = dict(adv.params)
    params.update(
        {
            "source_attack": adv.params.get("source_attack", adv.attack_tag),
            "source_model_id": source.model_id,
            "transfer_rate": float(fooled.mean()) if len(adv) else None,
        }
    )
    transferred = AdversarialSet(
        originals=adv.originals,
        perturbed=adv.perturbed,
        true_labels=adv.true_labels,
        predicted_labels=predicted,
        target_labels=adv.target_labels,
        attack_tag=AttackTag.TRANSFER.value,
        l2=adv.l2,
        linf=adv.linf,
        success=fooled,
        source_split=adv.source_split,
        model_id=victim.model_id,
        params=params,
    )
    return transferred.select(fooled)


def native_metric(adv: AdversarialSet) -> str:
    """Distance metric ("l2" or "linf") the attack behind `adv` optimizes."""
    tag = adv.params.get("source_attack", adv.attack_tag) if adv.attack_tag == AttackTag.TRANSFER else adv.attack_tag
    return "l2" if tag in L2_ATTACKS else "linf"


def matched_noise(adv: AdversarialSet, seed: int) -> Array:
    """Random noise with each sample's recorded distortion under the attack's native metric.

    L∞ attacks get ±ε′ per pixel with random signs; L2 attacks get a Gaussian direction scaled
    to the recorded L2 norm.
    """
    use_l2 = native_metric(adv) == "l2"
    noise = np.zeros(adv.originals.shape, dtype=np.float64)
    for i in range(len(adv)):
        rng = np.random.default_rng([seed, i])
        if use_l2:
            direction = rng.standard_normal(adv.originals.shape[1:])
            norm = np.linalg.norm(direction)
            noise[i] = direction * (adv.l2[i] / norm) if norm > 0 else 0.0
        else:
            noise[i] = rng.choice(np.array([-1.0, 1.0]), size=adv.originals.shape[1:]) * adv.linf[i]
    return noise


def noise_matched_benign(model: Predictor, adv: AdversarialSet, seed: int) -> LabeledImageSet:
    """Benign controls: each original plus matched random noise, kept if still classified correctly.

    Raises:
        InputError: If `adv` is empty
    """
    if len(adv) == 0:
        error_msg = "noise-matched controls need a non-empty adversarial set"
        raise InputError(error_msg)
    noisy = _clip(adv.originals.astype(np.float64) + matched_noise(adv, seed)).astype(np.float32)
    keep = model.predict(noisy) == adv.true_labels
    logger.info(f"noise-matched controls for {adv.attack_tag}: {int(keep.sum())}/{len(adv)} stay correctly classified")
    return LabeledImageSet(noisy[keep], adv.true_labels[keep], adv.source_split)
