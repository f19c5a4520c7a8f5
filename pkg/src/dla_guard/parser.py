"""Command line argument parser for dla-guard.

Every pipeline stage is a subcommand; stages communicate only through files under the
artifact root:

- train-target: train a LeNet or MLP512 target on MNIST
- craft: craft train- and test-split adversarial sets with one attack
- transfer: replay a surrogate's adversarial sets against the target
- extract: turn benign images or adversarial sets into activation traces
- train-alarm: train a dedicated or combined alarm on train-split traces
- evaluate: score alarms on balanced test-split merges
- cross-test: every alarm against every attack
- adaptive: detector-aware C&W against the secured target
- controls: noise-matched and misclassification controls
- pca: principal-component coordinates of a trace merge
"""

from __future__ import annotations

import argparse
from argparse import _SubParsersAction
from collections.abc import Sequence
from pathlib import Path

from .attacks import AttackKind, TargetPolicy
from .carlini import CW_PRESETS
from .datasets import COMBINED_TAG, Split
from .dla import PolicyMode
from .models import ARCHITECTURES, OptimizerKind, TraceMode
from .version import __version__

ATTACK_CHOICES = [kind.value for kind in AttackKind]
SOURCE_CHOICES = [*ATTACK_CHOICES, "transfer"]
ALARM_CHOICES = [*SOURCE_CHOICES, COMBINED_TAG]


def _add_common_options(parser: argparse.ArgumentParser) -> None:
    """Add the logging options shared by the top-level parser.

    Args:
        parser: The parser to add options to
    """
    parser.add_argument(
        "--log-file",
        type=str,
        help="Path to log file",
    )
    parser.add_argument(
        "-d",
        "--debug",
        action="store_true",
        help="Enable debug output",
    )


def _add_run_options(parser: argparse.ArgumentParser, data: bool = False) -> None:
    """Add the options every stage shares: artifact root, config file, target and seed.

    Args:
        parser: The subcommand parser
        data: Also add --data-dir and the sample caps, for stages that read MNIST
    """
    parser.add_argument("--artifacts", type=Path, help="Artifact root (default: $DLA_GUARD_ARTIFACTS or ./artifacts)")
    parser.add_argument("--config", type=Path, help="TOML config file; its values override flags")
    parser.add_argument("--experiment", help="Experiment name stamped into reports")
    parser.add_argument("--model", choices=sorted(ARCHITECTURES), help="Target architecture (default: mlp512)")
    parser.add_argument("--seed", type=int, help="Seed of every random stream (default: 0)")
    if data:
        parser.add_argument("--data-dir", type=Path, help="Directory with the MNIST IDX files")
        parser.add_argument("--cap", type=int, help="Class-balanced cap on images of both splits")
        parser.add_argument("--train-cap", type=int, help="Class-balanced cap on train-split images")
        parser.add_argument("--test-cap", type=int, help="Class-balanced cap on test-split images")


def _add_train_target_parser(subparsers: _SubParsersAction[argparse.ArgumentParser]) -> None:
    parser = subparsers.add_parser("train-target", help="Train a target classifier on MNIST")
    _add_run_options(parser, data=True)
    parser.add_argument("--epochs", type=int, help="Training epochs (default: 10)")
    parser.add_argument("--learning-rate", type=float, help="Optimizer step size (default: 0.001)")
    parser.add_argument("--batch-size", type=int, help="Samples per step (default: 100)")
    parser.add_argument("--optimizer", choices=[o.value for o in OptimizerKind], help="Optimizer (default: adam)")
    parser.add_argument(
        "--trace-mode",
        choices=[m.value for m in TraceMode],
        help="Which dense activations the trace records (default: post-relu+logits)",
    )


def _add_craft_parser(subparsers: _SubParsersAction[argparse.ArgumentParser]) -> None:
    """Add the craft command parser.

    Crafts on the train and the test split separately and keeps only the samples whose
    label actually flips.

    Args:
        subparsers: The subparsers to add the craft parser to
    """
    parser = subparsers.add_parser("craft", help="Craft adversarial sets on both splits")
    _add_run_options(parser, data=True)
    parser.add_argument("--attack", required=True, choices=ATTACK_CHOICES, help="Attack to run")
    parser.add_argument("--eps", dest="epsilon", type=float, help="L∞ budget of FGSM/BIM/PGD (default: 0.3)")
    parser.add_argument("--step-size", type=float, help="BIM/PGD step size (default: 0.01)")
    parser.add_argument("--iterations", type=int, help="BIM/PGD iterations (default: 40)")
    parser.add_argument(
        "--no-random-start",
        dest="random_start",
        action="store_const",
        const=False,
        help="Start PGD at the clean image",
    )
    parser.add_argument("--deepfool-iterations", type=int, help="DeepFool iteration cap (default: 50)")
    parser.add_argument("--overshoot", type=float, help="DeepFool overshoot (default: 0.02)")
    parser.add_argument(
        "--target-policy",
        choices=[p.value for p in TargetPolicy],
        help="Target-class policy for BIM, PGD and C&W (default: untargeted)",
    )


def _add_transfer_parser(subparsers: _SubParsersAction[argparse.ArgumentParser]) -> None:
    parser = subparsers.add_parser("transfer", help="Replay a surrogate's adversarial sets against the target")
    _add_run_options(parser)
    parser.add_argument(
        "--source-model", choices=sorted(ARCHITECTURES), help="Surrogate architecture (default: lenet)"
    )
    parser.add_argument("--attack", required=True, choices=ATTACK_CHOICES, help="Surrogate attack to replay")


def _add_extract_parser(subparsers: _SubParsersAction[argparse.ArgumentParser]) -> None:
    """Add the extract command parser.

    With --benign the clean MNIST images are traced, otherwise the named adversarial sets.

    Args:
        subparsers: The subparsers to add the extract parser to
    """
    parser = subparsers.add_parser("extract", help="Extract activation traces")
    _add_run_options(parser, data=True)
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--benign", action="store_true", help="Trace the clean images")
    source.add_argument("--attack", choices=SOURCE_CHOICES, help="Trace this attack's adversarial sets")


def _add_train_alarm_parser(subparsers: _SubParsersAction[argparse.ArgumentParser]) -> None:
    parser = subparsers.add_parser("train-alarm", help="Train an alarm on train-split traces")
    _add_run_options(parser)
    parser.add_argument("--attack", required=True, choices=ALARM_CHOICES, help="Attack, or 'combined'")
    parser.add_argument(
        "--attacks",
        nargs="+",
        choices=SOURCE_CHOICES,
        help="Attacks a combined alarm is trained on (default: the five crafting attacks)",
    )
    parser.add_argument("--epochs", type=int, help="Alarm training epochs (default: 10)")
    parser.add_argument("--batch-size", type=int, help="Alarm batch size (default: 100)")
    parser.add_argument("--learning-rate", type=float, help="Adam step size (default: 0.001)")
    parser.add_argument(
        "--standardize",
        action="store_const",
        const=True,
        help="Standardize traces before the alarm network",
    )
    parser.add_argument("--threshold", type=float, help="Adversarial score threshold (default: 0.5)")


def _add_evaluate_parser(subparsers: _SubParsersAction[argparse.ArgumentParser]) -> None:
    """Add the evaluate command parser.

    A dedicated alarm is scored on its own attack's test merge, the combined alarm on every
    attack in --attacks. The report ends with the mean false positive and negative rates.

    Args:
        subparsers: The subparsers to add the evaluate parser to
    """
    parser = subparsers.add_parser("evaluate", help="Score alarms on test-split traces")
    _add_run_options(parser)
    parser.add_argument("--alarms", nargs="+", choices=ALARM_CHOICES, help="Alarms to score (default: --attacks)")
    parser.add_argument("--attacks", nargs="+", choices=SOURCE_CHOICES, help="Attacks evaluated")
    parser.add_argument(
        "--policy",
        choices=[p.value for p in PolicyMode],
        help="How the evaluated alarms combine into one verdict (default: any)",
    )


def _add_cross_test_parser(subparsers: _SubParsersAction[argparse.ArgumentParser]) -> None:
    parser = subparsers.add_parser("cross-test", help="Score every alarm against every attack")
    _add_run_options(parser)
    parser.add_argument(
        "--attacks",
        nargs="+",
        choices=SOURCE_CHOICES,
        help="Attacks forming rows and columns; the combined alarm and column are added",
    )


def _add_adaptive_parser(subparsers: _SubParsersAction[argparse.ArgumentParser]) -> None:
    parser = subparsers.add_parser("adaptive", help="Detector-aware C&W against the secured target")
    _add_run_options(parser, data=True)
    parser.add_argument("--alarm", default=COMBINED_TAG, choices=ALARM_CHOICES, help="Alarm securing the target")
    parser.add_argument(
        "--params", default="appendix-e", choices=sorted(CW_PRESETS), help="C&W parameter preset (default: appendix-e)"
    )
    parser.add_argument("--count", type=int, default=100, help="Test images to attack (default: 100)")
    parser.add_argument("--alarm-weight", type=float, default=1.0, help="Weight of the alarm evasion term")


def _add_controls_parser(subparsers: _SubParsersAction[argparse.ArgumentParser]) -> None:
    parser = subparsers.add_parser("controls", help="Noise-matched and misclassification controls")
    _add_run_options(parser, data=True)
    parser.add_argument("--attacks", nargs="+", choices=SOURCE_CHOICES, help="Alarms given the noise control")


def _add_pca_parser(subparsers: _SubParsersAction[argparse.ArgumentParser]) -> None:
    parser = subparsers.add_parser("pca", help="Export principal-component coordinates of traces")
    _add_run_options(parser)
    parser.add_argument("--attack", required=True, choices=SOURCE_CHOICES, help="Adversarial traces to project")
    parser.add_argument("--split", choices=[s.value for s in Split], default=Split.TEST.value, help="Split")
    parser.add_argument("-k", "--components", type=int, default=2, help="Number of components (default: 2)")


def parse_args(argv: Sequence[str | Path] | None = None) -> argparse.Namespace:
    """Parse command line arguments.

    Args:
        argv: Command line arguments to parse. If None, sys.argv[1:] is used.

    Returns:
        Parsed arguments; options not given on the command line are None so the config
        layer can tell them apart from explicit values.
    """
    parser = argparse.ArgumentParser(
        prog="dla-guard",
        description="Detect adversarial examples from dense-layer activation traces",
    )
    parser.add_argument(
        "-V",
        "--version",
        action="version",
        version=f"%(prog)s {__version__}",
        help="Show program version and exit",
    )
    _add_common_options(parser)

    subparsers = parser.add_subparsers(dest="command", required=True)

    _add_train_target_parser(subparsers)
    _add_craft_parser(subparsers)
    _add_transfer_parser(subparsers)
    _add_extract_parser(subparsers)
    _add_train_alarm_parser(subparsers)
    _add_evaluate_parser(subparsers)
    _add_cross_test_parser(subparsers)
    _add_adaptive_parser(subparsers)
    _add_controls_parser(subparsers)
    _add_pca_parser(subparsers)

    return parser.parse_args(None if argv is None else [str(a) for a in argv])
