"""Run configuration, artifact layout and the artifact-directory lock.

Settings come from three sources, lowest priority first: built-in defaults, command-line
flags, and a TOML file passed with `--config`. The file has up to five tables:

    [run]     experiment, data_dir, model, source_model, trace_mode, attacks, seed,
              train_cap, test_cap, policy (verdict mode)
    [train]   target training: optimizer, learning_rate, epochs, batch_size, momentum
    [attack]  crafting: epsilon, step_size, iterations, random_start, policy, ...
    [cw]      C&W L2: max_iterations, learning_rate, binary_search_steps, initial_const, ...
    [alarm]   alarm training and decision: epochs, batch_size, learning_rate, standardize, threshold
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import tomllib
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from loguru import logger

from .attacks import AttackConfig, AttackKind
from .datasets import BENIGN_TAG, COMBINED_TAG, AttackTag, Split
from .dla import AlarmConfig, PolicyMode
from .exceptions import InputError, LockError
from .models import ARCHITECTURES, TrainConfig, TraceMode

ENV_ARTIFACTS = "DLA_GUARD_ARTIFACTS"
DEFAULT_ARTIFACT_DIR = Path("artifacts")
LOCK_NAME = ".dla-guard.lock"
TRANSFER_STEM = "transfer"
SETTING_TABLES = ("train", "attack", "cw", "alarm")

# Per-class caps for the iterative L2 attacks when neither a flag nor the config file sets one.
EXPENSIVE_ATTACK_CAPS: dict[str, dict[Split, int]] = {
    AttackKind.CW.value: {Split.TRAIN: 2000, Split.TEST: 500},
    AttackKind.DEEPFOOL.value: {Split.TRAIN: 2000, Split.TEST: 500},
}

# File-name stem of every adversarial source that can feed an alarm.
ATTACK_STEMS: dict[str, str] = {
    **{kind.value: kind.tag.value for kind in AttackKind},
    TRANSFER_STEM: AttackTag.TRANSFER.value,
}

# Flags that fill a settings table, keyed by the command that owns the table.
_COMMAND_TABLES: dict[str, str] = {"train-target": "train", "craft": "attack", "train-alarm": "alarm"}
_TABLE_FLAGS: dict[str, dict[str, str]] = {
    "train": {name: name for name in ("optimizer", "learning_rate", "epochs", "batch_size")},
    "attack": {
        **{name: name for name in ("epsilon", "step_size", "iterations", "random_start", "overshoot")},
        "deepfool_iterations": "deepfool_iterations",
        "target_policy": "policy",
    },
    "alarm": {name: name for name in ("epochs", "batch_size", "learning_rate", "standardize", "threshold")},
}
_RUN_FLAGS = (
    "experiment",
    "data_dir",
    "model",
    "source_model",
    "trace_mode",
    "attacks",
    "seed",
    "train_cap",
    "test_cap",
    "policy",
)


@dataclass
class RunConfig:
    """Everything one command needs to know about the experiment it belongs to.

    Attributes:
        experiment: Free-form experiment name stamped into reports
        data_dir: Directory with the four MNIST IDX files
        artifact_dir: Root of models/, adv/, traces/, alarms/ and reports/
        model: Target architecture ("lenet" or "mlp512")
        source_model: Surrogate architecture for transfer sets
        trace_mode: Dense activations a newly trained target records in its traces
        attacks: Attack stems a combined alarm and the batch commands cover
        seed: Seed of every random stream of the command
        train_cap: Class-balanced cap on train-split images, None for the per-attack default
        test_cap: Class-balanced cap on test-split images, None for the per-attack default
        policy: Verdict policy mode when several alarms secure one target
        train: Overrides of the target training settings
        attack: Overrides of the crafting settings
        cw: Overrides of the C&W settings
        alarm: Overrides of the alarm settings
    """

    experiment: str = "mnist"
    data_dir: Path = Path("data/mnist")
    artifact_dir: Path = DEFAULT_ARTIFACT_DIR
    model: str = "mlp512"
    source_model: str = "lenet"
    trace_mode: str = TraceMode.POST_RELU_LOGITS.value
    attacks: list[str] = field(default_factory=lambda: [kind.value for kind in AttackKind])
    seed: int = 0
    train_cap: int | None = None
    test_cap: int | None = None
    policy: str = PolicyMode.ANY.value
    train: dict[str, Any] = field(default_factory=dict)
    attack: dict[str, Any] = field(default_factory=dict)
    cw: dict[str, Any] = field(default_factory=dict)
    alarm: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.data_dir = Path(self.data_dir)
        self.artifact_dir = Path(self.artifact_dir)
        for name in (self.model, self.source_model):
            if name not in ARCHITECTURES:
                error_msg = f"unknown model {name!r}; choose from {', '.join(sorted(ARCHITECTURES))}"
                raise InputError(error_msg)
        unknown = [stem for stem in self.attacks if stem not in ATTACK_STEMS]
        if unknown:
            error_msg = f"unknown attacks: {', '.join(unknown)}"
            raise InputError(error_msg)
        try:
            PolicyMode(self.policy)
        except ValueError as err:
            error_msg = f"unknown verdict policy {self.policy!r}"
            raise InputError(error_msg) from err
        try:
            TraceMode(self.trace_mode)
        except ValueError as err:
            error_msg = f"unknown trace mode {self.trace_mode!r}"
            raise InputError(error_msg) from err
        for cap in (self.train_cap, self.test_cap):
            if cap is not None and cap < 1:
                error_msg = f"sample caps must be at least 1, got {cap}"
                raise InputError(error_msg)

    def cap(self, split: Split, attack: str | None = None) -> int | None:
        """Per-class cap on `split` images; None keeps every image.

        An explicit cap always wins. Otherwise C&W and DeepFool fall back to
        `EXPENSIVE_ATTACK_CAPS` and every other source uses the full split.
        """
        explicit = self.train_cap if split == Split.TRAIN else self.test_cap
        if explicit is not None or attack is None:
            return explicit
        return EXPENSIVE_ATTACK_CAPS.get(attack, {}).get(split)

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**{"seed": self.seed, **self.train})
        except TypeError as err:
            error_msg = f"invalid [train] settings: {err}"
            raise InputError(error_msg) from err

    def attack_config(self, kind: str) -> AttackConfig:
        mapping: dict[str, Any] = {"seed": self.seed, **self.attack, "kind": kind}
        if self.cw:
            mapping["cw"] = {**mapping.get("cw", {}), **self.cw}
        return AttackConfig.from_mapping(mapping)

    def alarm_config(self) -> AlarmConfig:
        try:
            return AlarmConfig(**self.alarm)
        except TypeError as err:
            error_msg = f"invalid [alarm] settings: {err}"
            raise InputError(error_msg) from err

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["data_dir"] = str(self.data_dir)
        data["artifact_dir"] = str(self.artifact_dir)
        return data

    def config_hash(self) -> str:
        """Stable hash over the canonical JSON of the settings; the artifact root is excluded."""
        data = self.to_dict()
        data.pop("artifact_dir")
        canonical = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def provenance(self, command: str, **inputs: Any) -> dict[str, Any]:
        """Stamp for every artifact and report a command writes."""
        return {
            "command": command,
            "config_hash": self.config_hash(),
            "seed": self.seed,
            "experiment": self.experiment,
            "inputs": inputs,
        }


def load_config_file(path: Path) -> dict[str, Any]:
    """Read a TOML config file.

    Raises:
        InputError: If the file is missing, is not TOML, or has unknown tables or keys
    """
    try:
        with path.open("rb") as handle:
            data = tomllib.load(handle)
    except FileNotFoundError as err:
        error_msg = f"config file {path} not found"
        raise InputError(error_msg) from err
    except tomllib.TOMLDecodeError as err:
        error_msg = f"config file {path} is not valid TOML: {err}"
        raise InputError(error_msg) from err
    unknown = set(data) - {"run", *SETTING_TABLES}
    if unknown:
        error_msg = f"config file {path} has unknown tables: {', '.join(sorted(unknown))}"
        raise InputError(error_msg)
    run_keys = {f.name for f in fields(RunConfig)} - {"artifact_dir", *SETTING_TABLES}
    unknown = set(data.get("run", {})) - run_keys
    if unknown:
        error_msg = f"config file {path} has unknown [run] keys: {', '.join(sorted(unknown))}"
        raise InputError(error_msg)
    return data


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Resolve defaults, flags and the optional config file into one RunConfig.

    The artifact root comes from `--artifacts`, else `DLA_GUARD_ARTIFACTS`, else ./artifacts.

    Raises:
        InputError: On an unreadable config file or invalid values
    """
    values: dict[str, Any] = {
        name: getattr(args, name) for name in _RUN_FLAGS if getattr(args, name, None) is not None
    }
    cap = getattr(args, "cap", None)
    if cap is not None:
        values.setdefault("train_cap", cap)
        values.setdefault("test_cap", cap)
    artifact_dir = getattr(args, "artifacts", None) or os.environ.get(ENV_ARTIFACTS) or DEFAULT_ARTIFACT_DIR
    values["artifact_dir"] = Path(artifact_dir)

    tables: dict[str, dict[str, Any]] = {name: {} for name in SETTING_TABLES}
    table = _COMMAND_TABLES.get(getattr(args, "command", ""))
    if table is not None:
        for dest, key in _TABLE_FLAGS[table].items():
            value = getattr(args, dest, None)
            if value is not None:
                tables[table][key] = value

    config_path = getattr(args, "config", None)
    if config_path is not None:
        data = load_config_file(Path(config_path))
        values.update(data.get("run", {}))
        for name in SETTING_TABLES:
            tables[name].update(data.get(name, {}))
        logger.debug(f"applied config file {config_path}")
    return RunConfig(**values, **tables)


@dataclass(frozen=True)
class ArtifactLayout:
    """Where each pipeline stage reads and writes its files under the artifact root."""

    root: Path

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def lock(self) -> Path:
        return self.root / LOCK_NAME

    def model(self, name: str) -> Path:
        return self.root / "models" / f"{name}.dla"

    def adversarial(self, model: str, stem: str, split: Split) -> Path:
        return self.root / "adv" / model / f"{stem}-{split.value}.dla"

    def traces(self, model: str, stem: str, split: Split) -> Path:
        return self.root / "traces" / model / f"{stem}-{split.value}.dla"

    def benign_traces(self, model: str, split: Split) -> Path:
        return self.traces(model, BENIGN_TAG, split)

    def alarm(self, model: str, stem: str) -> Path:
        return self.root / "alarms" / model / f"{stem}.dla"

    def combined_alarm(self, model: str) -> Path:
        return self.alarm(model, COMBINED_TAG)


@contextmanager
def artifact_lock(root: Path) -> Iterator[Path]:
    """Hold the artifact directory for the duration of one command.

    Raises:
        LockError: If another command already holds the directory
    """
    root.mkdir(parents=True, exist_ok=True)
    lock = root / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as err:
        error_msg = f"artifact directory {root} is locked by another command (remove {lock} if it is stale)"
        raise LockError(error_msg) from err
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield lock
    finally:
        lock.unlink(missing_ok=True)
