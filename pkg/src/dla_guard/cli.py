"""Command line interface for dla-guard."""

from __future__ import annotations

import argparse
import sys
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
from loguru import logger

from .adaptive import adaptive_report
from .attacks import craft_set, transfer_set
from .carlini import CW_PRESETS, CWParams
from .config import TRANSFER_STEM, ArtifactLayout, RunConfig, artifact_lock, build_run_config
from .datasets import (
    COMBINED_TAG,
    ActivationTraceSet,
    LabeledImageSet,
    Split,
    balanced_merge,
    cap_per_class,
    load_adversarial_set,
    load_mnist_split,
    load_traces,
    save_adversarial_set,
    save_traces,
)
from .dla import (
    AlarmModel,
    PolicyMode,
    VerdictPolicy,
    extract_adversarial,
    extract_benign,
    load_alarm,
    save_alarm,
    secure_classify,
    train_alarm,
    train_combined_alarm,
)
from .evaluation import (
    EvalReport,
    cross_test,
    error_rate_summary,
    evaluate_alarm,
    misclassification_control,
    noise_controls_for,
    pca_project,
    write_pca_coordinates,
)
from .exceptions import BindingError, DLAGuardError, FormatError, InputError
from .logging import setup_logging
from .models import ARCHITECTURES, NetworkModel, TraceMode, accuracy, load_model, save_model, train
from .parser import parse_args
from .report_outputter import ReportOutputter
from .validation import check_artifact_dir, check_artifacts, check_data_dir

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BINDING = 3
EXIT_RUNTIME = 4

METRIC_COLUMNS = ["alarm", "test", "tp", "tn", "fp", "fn", "accuracy", "precision", "recall", "f1", "fpr", "fnr"]

Handler = Callable[[argparse.Namespace, RunConfig, ArtifactLayout], int]


@contextmanager
def _stage(cfg: RunConfig, layout: ArtifactLayout, inputs: Sequence[Path], data: bool = False) -> Iterator[None]:
    """Validate a command's inputs, then hold the artifact lock while it runs.

    Nothing is written before the data directory and every upstream artifact have been found.
    """
    if data:
        check_data_dir(cfg.data_dir)
    check_artifacts(list(inputs))
    with artifact_lock(layout.root):
        yield


def _load_split(cfg: RunConfig, split: Split, attack: str | None = None) -> LabeledImageSet:
    return cap_per_class(load_mnist_split(cfg.data_dir, split), cfg.cap(split, attack))


def _load_target(name: str, layout: ArtifactLayout) -> NetworkModel:
    return load_model(layout.model(name), ARCHITECTURES[name]().layers)


def _load_bound_traces(path: Path, target: NetworkModel) -> ActivationTraceSet:
    """Load a trace set and make sure it was extracted from `target`.

    Raises:
        BindingError: If the traces come from another model
    """
    traces = load_traces(path)
    if traces.target_model_id != target.model_id:
        error_msg = f"{path} holds traces of another target"
        raise BindingError(error_msg, target.model_id, traces.target_model_id)
    return traces


def _load_bound_alarm(path: Path, target: NetworkModel) -> AlarmModel:
    alarm = load_alarm(path)
    alarm.check_binding(target.model_id, target.trace_width)
    return alarm


def _emit(outputter: ReportOutputter, layout: ArtifactLayout, stem: str) -> None:
    """Print the text rendering and write every rendering under reports/."""
    written = outputter.write(layout.reports, stem)
    print(outputter.to_text(), end="")
    logger.info(f"wrote {written[0]}")


def _metric_row(report: EvalReport) -> list[object]:
    counts = report.counts
    values = report.metrics
    row: list[object] = [report.alarm_tag, report.test_tag]
    row += [None] * 4 if counts is None else [counts.tp, counts.tn, counts.fp, counts.fn]
    if values is None:
        return [*row, *([None] * 6)]
    return [*row, values.accuracy, values.precision, values.recall, values.f1, values.fpr, values.fnr]


def _handle_train_target(args: argparse.Namespace, cfg: RunConfig, layout: ArtifactLayout) -> int:
    """Handle the train-target command: train a target model and write it with its training log.

    Args:
        args: Parsed command line arguments
        cfg: Resolved run configuration
        layout: Artifact paths

    Returns:
        0 on success
    """
    train_cfg = cfg.train_config()
    with _stage(cfg, layout, [], data=True):
        train_data = _load_split(cfg, Split.TRAIN)
        test_data = _load_split(cfg, Split.TEST)
        model = ARCHITECTURES[cfg.model](seed=cfg.seed, trace_mode=TraceMode(cfg.trace_mode))
        model, log = train(model, train_data, train_cfg)
        test_accuracy = accuracy(model, test_data)
        provenance = cfg.provenance(
            "train-target", train_samples=len(train_data), test_samples=len(test_data), train=asdict(train_cfg)
        )
        extra = {"provenance": provenance, "test_accuracy": test_accuracy, "history": log.to_rows()}
        save_model(model, layout.model(cfg.model), extra=extra)
        logger.info(f"{cfg.model} ({model.model_id}) test accuracy {test_accuracy:.4f}")

        outputter = ReportOutputter(f"train-target {cfg.model}", provenance)
        outputter.add_data("model_id", model.model_id)
        outputter.add_section(
            "summary",
            ["model", "model_id", "parameters", "trace_width", "test_accuracy"],
            [[cfg.model, model.model_id, model.parameter_count, model.trace_width, test_accuracy]],
        )
        outputter.add_section("epochs", ["epoch", "loss", "accuracy"], log.to_rows())
        _emit(outputter, layout, f"train-{cfg.model}")
    return EXIT_OK


def _handle_craft(args: argparse.Namespace, cfg: RunConfig, layout: ArtifactLayout) -> int:
    """Handle the craft command: one adversarial set per split, plus a crafting summary."""
    attack_cfg = cfg.attack_config(args.attack)
    with _stage(cfg, layout, [layout.model(cfg.model)], data=True):
        model = _load_target(cfg.model, layout)
        caps = {split.value: cfg.cap(split, args.attack) for split in Split}
        provenance = cfg.provenance(
            "craft", model_id=model.model_id, attack=attack_cfg.to_dict(), caps_per_class=caps
        )
        summary: list[list[object]] = []
        histogram: list[list[object]] = []
        for split in Split:
            data = _load_split(cfg, split, args.attack)
            adv = craft_set(model, data, attack_cfg)
            adv.params.update({"cap": caps[split.value], "provenance": provenance})
            save_adversarial_set(adv, layout.adversarial(cfg.model, args.attack, split))
            summary.append(
                [
                    split.value,
                    caps[split.value],
                    adv.params["attempted"],
                    adv.params["attacked"],
                    adv.params["successful"],
                    adv.params["success_rate"],
                    float(adv.l2.mean()) if len(adv) else None,
                    float(adv.linf.mean()) if len(adv) else None,
                ]
            )
            achieved = adv.achieved_histogram(model.class_count)
            intended = adv.intended_histogram(model.class_count)
            histogram.extend([split.value, k, achieved[k], intended[k]] for k in range(model.class_count))

        outputter = ReportOutputter(f"craft {args.attack} on {cfg.model}", provenance)
        outputter.add_section(
            "summary",
            ["split", "cap_per_class", "attempted", "attacked", "successful", "success_rate", "mean_l2", "mean_linf"],
            summary,
        )
        outputter.add_section("histogram", ["split", "class", "achieved", "intended"], histogram)
        _emit(outputter, layout, f"craft-{cfg.model}-{args.attack}")
    return EXIT_OK


def _handle_transfer(args: argparse.Namespace, cfg: RunConfig, layout: ArtifactLayout) -> int:
    """Handle the transfer command: keep the surrogate's examples that also fool the target."""
    inputs = [layout.model(cfg.source_model), layout.model(cfg.model)]
    inputs += [layout.adversarial(cfg.source_model, args.attack, split) for split in Split]
    with _stage(cfg, layout, inputs):
        source = _load_target(cfg.source_model, layout)
        victim = _load_target(cfg.model, layout)
        provenance = cfg.provenance(
            "transfer", source_model_id=source.model_id, victim_model_id=victim.model_id, attack=args.attack
        )
        rows: list[list[object]] = []
        for split in Split:
            adv = load_adversarial_set(layout.adversarial(cfg.source_model, args.attack, split))
            moved = transfer_set(source, victim, adv)
            moved.params["provenance"] = provenance
            save_adversarial_set(moved, layout.adversarial(cfg.model, TRANSFER_STEM, split))
            rows.append([split.value, len(adv), len(moved), moved.params["transfer_rate"]])

        outputter = ReportOutputter(f"transfer {args.attack}: {cfg.source_model} -> {cfg.model}", provenance)
        outputter.add_section("summary", ["split", "source_examples", "transferred", "transfer_rate"], rows)
        _emit(outputter, layout, f"transfer-{cfg.source_model}-{cfg.model}")
    return EXIT_OK


def _handle_extract(args: argparse.Namespace, cfg: RunConfig, layout: ArtifactLayout) -> int:
    """Handle the extract command: trace benign images or one attack's sets on both splits."""
    inputs = [layout.model(cfg.model)]
    if not args.benign:
        inputs += [layout.adversarial(cfg.model, args.attack, split) for split in Split]
    with _stage(cfg, layout, inputs, data=args.benign):
        target = _load_target(cfg.model, layout)
        source = "benign" if args.benign else args.attack
        provenance = cfg.provenance("extract", model_id=target.model_id, source=source)
        rows: list[list[object]] = []
        for split in Split:
            if args.benign:
                data = _load_split(cfg, split)
                traces = extract_benign(target, data)
                path = layout.benign_traces(cfg.model, split)
            else:
                adv = load_adversarial_set(layout.adversarial(cfg.model, source, split))
                traces = extract_adversarial(target, adv)
                path = layout.traces(cfg.model, source, split)
            traces.provenance.update(provenance)
            save_traces(traces, path)
            rows.append([split.value, len(traces), traces.width])

        outputter = ReportOutputter(f"extract {source} on {cfg.model}", provenance)
        outputter.add_section("summary", ["split", "traces", "width"], rows)
        _emit(outputter, layout, f"extract-{cfg.model}-{source}")
    return EXIT_OK


def _handle_train_alarm(args: argparse.Namespace, cfg: RunConfig, layout: ArtifactLayout) -> int:
    """Handle the train-alarm command: a dedicated alarm, or the combined one over --attacks."""
    alarm_cfg = cfg.alarm_config()
    stems = cfg.attacks if args.attack == COMBINED_TAG else [args.attack]
    inputs = [layout.model(cfg.model), layout.benign_traces(cfg.model, Split.TRAIN)]
    inputs += [layout.traces(cfg.model, stem, Split.TRAIN) for stem in stems]
    with _stage(cfg, layout, inputs):
        target = _load_target(cfg.model, layout)
        benign = _load_bound_traces(layout.benign_traces(cfg.model, Split.TRAIN), target)
        adversarial = [_load_bound_traces(layout.traces(cfg.model, stem, Split.TRAIN), target) for stem in stems]
        if args.attack == COMBINED_TAG:
            alarm = train_combined_alarm([(benign, adv) for adv in adversarial], cfg.seed, alarm_cfg)
        else:
            alarm = train_alarm(benign, adversarial[0], cfg.seed, alarm_cfg)
        alarm.provenance = cfg.provenance(
            "train-alarm", target_model_id=target.model_id, attacks=stems, alarm=asdict(alarm_cfg)
        )
        save_alarm(alarm, layout.alarm(cfg.model, args.attack))

        outputter = ReportOutputter(f"train-alarm {args.attack} on {cfg.model}", alarm.provenance)
        outputter.add_section("epochs", ["epoch", "loss", "accuracy"], alarm.history)
        _emit(outputter, layout, f"alarm-{cfg.model}-{args.attack}")
    return EXIT_OK


def _policy_rows(
    target: NetworkModel, policy: VerdictPolicy, layout: ArtifactLayout, cfg: RunConfig, stems: list[str]
) -> list[list[object]]:
    """Flag rates of the secured target on each attack's test examples and their originals."""
    rows: list[list[object]] = []
    for stem in stems:
        adv = load_adversarial_set(layout.adversarial(cfg.model, stem, Split.TEST))
        if len(adv) == 0:
            rows.append([stem, 0, None, None])
            continue
        attacked = secure_classify(target, policy, adv.perturbed)
        clean = secure_classify(target, policy, adv.originals)
        rows.append([stem, len(adv), float(attacked.flag.mean()), float(clean.flag.mean())])
    return rows


def _handle_evaluate(args: argparse.Namespace, cfg: RunConfig, layout: ArtifactLayout) -> int:
    """Handle the evaluate command.

    Each dedicated alarm is scored on its own attack's balanced test merge and the combined
    alarm on every attack in the run; the error-rate summary covers the dedicated alarms.
    The alarms are then combined under the verdict policy and run through the secured target
    on the raw test examples.
    """
    alarm_stems = args.alarms or cfg.attacks
    test_stems = sorted({s for a in alarm_stems for s in (cfg.attacks if a == COMBINED_TAG else [a])}, key=str)
    inputs = [layout.model(cfg.model), layout.benign_traces(cfg.model, Split.TEST)]
    inputs += [layout.alarm(cfg.model, stem) for stem in alarm_stems]
    inputs += [layout.traces(cfg.model, stem, Split.TEST) for stem in test_stems]
    inputs += [layout.adversarial(cfg.model, stem, Split.TEST) for stem in test_stems]
    with _stage(cfg, layout, inputs):
        target = _load_target(cfg.model, layout)
        benign = _load_bound_traces(layout.benign_traces(cfg.model, Split.TEST), target)
        adversarial = {
            stem: _load_bound_traces(layout.traces(cfg.model, stem, Split.TEST), target) for stem in test_stems
        }
        alarms = [_load_bound_alarm(layout.alarm(cfg.model, stem), target) for stem in alarm_stems]
        reports: list[EvalReport] = []
        for stem, alarm in zip(alarm_stems, alarms, strict=True):
            for test_stem in cfg.attacks if stem == COMBINED_TAG else [stem]:
                reports.append(evaluate_alarm(alarm, benign, adversarial[test_stem], cfg.seed))
        summary = error_rate_summary([r for r in reports if r.alarm_tag != COMBINED_TAG])
        if summary["fnr_le_fpr"] is False:
            logger.warning("mean false negative rate exceeds the mean false positive rate")
        policy = VerdictPolicy(PolicyMode(cfg.policy), alarms)

        provenance = cfg.provenance("evaluate", target_model_id=target.model_id, alarms=alarm_stems)
        outputter = ReportOutputter(f"evaluate on {cfg.model}", provenance)
        outputter.add_data("reports", [r.to_dict() for r in reports])
        outputter.add_data("error_rates", summary)
        outputter.add_section("metrics", METRIC_COLUMNS, [_metric_row(r) for r in reports])
        outputter.add_section(
            "error_rates",
            ["alarms", "mean_fpr", "mean_fnr", "fnr_le_fpr"],
            [[summary["alarms"], summary["mean_fpr"], summary["mean_fnr"], summary["fnr_le_fpr"]]],
        )
        outputter.add_section(
            f"policy_{cfg.policy}",
            ["attack", "examples", "flagged_adversarial", "flagged_originals"],
            _policy_rows(target, policy, layout, cfg, test_stems),
        )
        _emit(outputter, layout, f"evaluate-{cfg.model}-{'-'.join(alarm_stems)}")
    return EXIT_OK


def _handle_cross_test(args: argparse.Namespace, cfg: RunConfig, layout: ArtifactLayout) -> int:
    """Handle the cross-test command: every dedicated alarm and the combined alarm on every attack."""
    stems = args.attacks or cfg.attacks
    inputs = [layout.model(cfg.model), layout.benign_traces(cfg.model, Split.TEST), layout.combined_alarm(cfg.model)]
    inputs += [layout.alarm(cfg.model, stem) for stem in stems]
    inputs += [layout.traces(cfg.model, stem, Split.TEST) for stem in stems]
    with _stage(cfg, layout, inputs):
        target = _load_target(cfg.model, layout)
        benign = _load_bound_traces(layout.benign_traces(cfg.model, Split.TEST), target)
        alarms = [load_alarm(layout.alarm(cfg.model, stem)) for stem in stems]
        alarms.append(load_alarm(layout.combined_alarm(cfg.model)))
        test_sets = [
            (benign, _load_bound_traces(layout.traces(cfg.model, stem, Split.TEST), target)) for stem in stems
        ]
        matrix = cross_test(target, alarms, test_sets, cfg.seed)

        provenance = cfg.provenance("cross-test", target_model_id=target.model_id, attacks=stems)
        outputter = ReportOutputter(f"cross-test on {cfg.model}", provenance)
        alarm_means = matrix.alarm_means()
        column_means = matrix.column_means()
        outputter.add_section(
            "f1",
            ["alarm", *matrix.test_tags, "mean"],
            [[tag, *row, alarm_means[tag]] for tag, row in zip(matrix.alarm_tags, matrix.f1.tolist(), strict=True)],
        )
        outputter.add_section(
            "accuracy",
            ["alarm", *matrix.test_tags],
            [[tag, *row] for tag, row in zip(matrix.alarm_tags, matrix.accuracy.tolist(), strict=True)],
        )
        outputter.add_section(
            "column_means", ["test", "mean_f1_other_alarms"], [[tag, mean] for tag, mean in column_means.items()]
        )
        _emit(outputter, layout, f"cross-test-{cfg.model}")
    return EXIT_OK


def _handle_adaptive(args: argparse.Namespace, cfg: RunConfig, layout: ArtifactLayout) -> int:
    """Handle the adaptive command: baseline against detector-aware C&W on the same images."""
    if args.count < 1:
        error_msg = f"--count must be at least 1, got {args.count}"
        raise InputError(error_msg)
    try:
        params: CWParams = replace(CW_PRESETS[args.params], **cfg.cw)
    except TypeError as err:
        error_msg = f"invalid [cw] settings: {err}"
        raise InputError(error_msg) from err
    with _stage(cfg, layout, [layout.model(cfg.model), layout.alarm(cfg.model, args.alarm)], data=True):
        target = _load_target(cfg.model, layout)
        alarm = _load_bound_alarm(layout.alarm(cfg.model, args.alarm), target)
        images = cap_per_class(load_mnist_split(cfg.data_dir, Split.TEST), args.count)
        result = adaptive_report(target, alarm, images, params, args.alarm_weight)
        baseline_count = int(result.baseline_success.sum())
        adaptive_count = int(result.adaptive_success.sum())

        provenance = cfg.provenance(
            "adaptive", target_model_id=target.model_id, alarm=args.alarm, preset=args.params, count=args.count
        )
        outputter = ReportOutputter(f"adaptive C&W on {cfg.model} secured by {args.alarm}", provenance)
        outputter.add_data("result", result.to_dict())
        outputter.add_section(
            "summary",
            ["run", "attempted", "successes", "success_rate", "mean_l2"],
            [
                ["baseline", result.attempted, baseline_count, result.baseline_rate, result.baseline_mean_l2],
                ["adaptive", result.attempted, adaptive_count, result.adaptive_rate, result.adaptive_mean_l2],
            ],
        )
        matched_baseline, matched_adaptive = result.matched_means
        outputter.add_section(
            "distortion",
            ["l2_ratio", "matched_baseline_mean_l2", "matched_adaptive_mean_l2", "unverified_claims"],
            [[result.l2_ratio, matched_baseline, matched_adaptive, result.adaptive_claimed - adaptive_count]],
        )
        _emit(outputter, layout, f"adaptive-{cfg.model}-{args.alarm}-{args.params}")
    return EXIT_OK


def _handle_controls(args: argparse.Namespace, cfg: RunConfig, layout: ArtifactLayout) -> int:
    """Handle the controls command: noise-matched benign images and the misclassification alarm.

    The misclassification alarm's F1 is compared with the FGSM alarm's F1 on its balanced test
    trace merge, the same figure the evaluate command reports for it.
    """
    stems = args.attacks or cfg.attacks
    inputs = [layout.model(cfg.model)]
    inputs += [layout.alarm(cfg.model, stem) for stem in stems]
    inputs += [layout.adversarial(cfg.model, stem, Split.TEST) for stem in stems]
    if "fgsm" in stems:
        inputs += [layout.benign_traces(cfg.model, Split.TEST), layout.traces(cfg.model, "fgsm", Split.TEST)]
    alarm_cfg = cfg.alarm_config()
    with _stage(cfg, layout, inputs, data=True):
        target = _load_target(cfg.model, layout)
        noise_rows: list[list[object]] = []
        for stem in stems:
            alarm = _load_bound_alarm(layout.alarm(cfg.model, stem), target)
            adv_test = load_adversarial_set(layout.adversarial(cfg.model, stem, Split.TEST))
            if len(adv_test) == 0:
                logger.warning(f"no {stem} test examples; noise control skipped")
                noise_rows.append([stem, None, None, None, 0])
                continue
            extra = noise_controls_for(alarm, target, adv_test, cfg.seed).extra
            noise_rows.append([stem, extra["clean_f1"], extra["noisy_f1"], extra["f1_drop"], extra["noisy_samples"]])

        control = misclassification_control(
            target, _load_split(cfg, Split.TRAIN), _load_split(cfg, Split.TEST), cfg.seed, alarm_cfg
        )
        reference: float | None = None
        if "fgsm" in stems:
            reference = evaluate_alarm(
                _load_bound_alarm(layout.alarm(cfg.model, "fgsm"), target),
                _load_bound_traces(layout.benign_traces(cfg.model, Split.TEST), target),
                _load_bound_traces(layout.traces(cfg.model, "fgsm", Split.TEST), target),
                cfg.seed,
            ).f1
        margin = None if reference is None or control.f1 is None else reference - control.f1

        provenance = cfg.provenance("controls", target_model_id=target.model_id, attacks=stems)
        outputter = ReportOutputter(f"controls on {cfg.model}", provenance)
        outputter.add_data("misclassification", control.to_dict())
        outputter.add_data("fgsm_reference_f1", reference)
        outputter.add_section("noise", ["alarm", "clean_f1", "noisy_f1", "f1_drop", "noisy_samples"], noise_rows)
        outputter.add_section(
            "misclassification",
            ["train_misclassified", "test_misclassified", "f1", "margin_below_fgsm", "warnings"],
            [
                [
                    control.extra["train_misclassified"],
                    control.extra["test_misclassified"],
                    control.f1,
                    margin,
                    "; ".join(control.warnings),
                ]
            ],
        )
        _emit(outputter, layout, f"controls-{cfg.model}")
    return EXIT_OK


def _handle_pca(args: argparse.Namespace, cfg: RunConfig, layout: ArtifactLayout) -> int:
    """Handle the pca command: project a balanced benign/adversarial merge onto k components."""
    split = Split(args.split)
    inputs = [
        layout.model(cfg.model),
        layout.benign_traces(cfg.model, split),
        layout.traces(cfg.model, args.attack, split),
    ]
    with _stage(cfg, layout, inputs):
        target = _load_target(cfg.model, layout)
        benign = _load_bound_traces(layout.benign_traces(cfg.model, split), target)
        adversarial = _load_bound_traces(layout.traces(cfg.model, args.attack, split), target)
        projection = pca_project(balanced_merge(benign, adversarial, cfg.seed), args.components)
        stem = f"pca-{cfg.model}-{args.attack}-{split.value}"
        write_pca_coordinates(projection, layout.reports / f"{stem}.csv")

        provenance = cfg.provenance("pca", target_model_id=target.model_id, attack=args.attack, split=split.value)
        outputter = ReportOutputter(f"pca {args.attack} on {cfg.model} ({split.value})", provenance)
        variance = projection.explained_variance.tolist()
        ratio = projection.explained_variance_ratio.tolist()
        outputter.add_section(
            "variance",
            ["component", "explained_variance", "explained_variance_ratio"],
            [[f"pc{i + 1}", variance[i], ratio[i]] for i in range(len(variance))],
        )
        _emit(outputter, layout, f"{stem}-variance")
    return EXIT_OK


DISPATCH_TABLE: dict[str, Handler] = {
    "train-target": _handle_train_target,
    "craft": _handle_craft,
    "transfer": _handle_transfer,
    "extract": _handle_extract,
    "train-alarm": _handle_train_alarm,
    "evaluate": _handle_evaluate,
    "cross-test": _handle_cross_test,
    "adaptive": _handle_adaptive,
    "controls": _handle_controls,
    "pca": _handle_pca,
}


def main(argv: Sequence[str] | None = None) -> int:
    """Main entry point for the command line interface.

    This function:
    1. Parses command line arguments
    2. Sets up logging based on the debug and log file options
    3. Resolves flags, config file and environment into a RunConfig
    4. Dispatches to the command handler, which validates its inputs before writing anything

    Args:
        argv: Command line arguments as a sequence of strings. If None,
            sys.argv[1:] is used.

    Returns:
        0 on success
        2 on usage, configuration, missing-data and file-format errors
        3 when artifacts are bound to different target models
        4 on training divergence, numeric failures and other runtime errors

    Example:
        >>> main(["train-target", "--model", "mlp512", "--epochs", "10", "--seed", "7"])
        0
    """
    args: argparse.Namespace = parse_args(sys.argv[1:] if argv is None else argv)
    setup_logging(getattr(args, "log_file", None), getattr(args, "debug", False))

    try:
        cfg = build_run_config(args)
        check_artifact_dir(cfg.artifact_dir)
        return DISPATCH_TABLE[args.command](args, cfg, ArtifactLayout(cfg.artifact_dir))
    except BindingError as e:
        logger.error(f"Error: {e} (expected model {e.expected_id}, found {e.actual_id})")
        return EXIT_BINDING
    except (InputError, FormatError) as e:
        logger.error(f"Error: {e}")
        return EXIT_USAGE
    except (DLAGuardError, OSError, np.linalg.LinAlgError) as e:
        logger.error(f"Error: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
