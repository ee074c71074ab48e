"""Command line: dataset generation, sweeps, ablations, evaluation and audits."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np
import yaml
from pydantic import ValidationError

from mmtpsm.const import SCHEMA_VERSION, Ablation, ExitCode, SeedStream, TrainMode
from mmtpsm.helper import rng_for
from mmtpsm.metrics import InstanceSet, evaluate
from mmtpsm.models import (
    DatasetManifest,
    ExperimentSpec,
    MetricReport,
    SweepAggregate,
    SweepCell,
    SweepReport,
)
from mmtpsm.segmenter import load_checkpoint, predict_instances
from mmtpsm.synth import MANIFEST_FILE, build_dataset, load_manifest, load_scene
from mmtpsm.trainer import Trainer, gradient_audit, write_report
from mmtpsm.types import (
    CheckpointError,
    ConfigError,
    DatasetError,
    GeometryError,
    LayoutMismatchError,
    MMTPSMError,
    NumericalAbortError,
)

__all__ = [
    "cmd_ablate",
    "cmd_audit",
    "cmd_eval",
    "cmd_generate",
    "cmd_sweep",
    "labeled_subset",
    "load_spec",
    "main",
    "write_sweep",
]

_LOGGER = logging.getLogger(__name__)

SWEEP_CSV = "sweep.csv"
SWEEP_JSON = "sweep.json"
ABLATION_CSV = "ablation.csv"
ABLATION_JSON = "ablation.json"
AUDIT_JSON = "audit.json"
SWEEP_COLUMNS = ("fraction", "method", "seed", "status", *MetricReport.CSV_COLUMNS)

_EXPERIMENT_KEYS = (
    "mode",
    "ablation",
    "labeled_fractions",
    "ablation_fraction",
    "replicate_seeds",
    "iou_thresholds",
)


def load_spec(
    path: Path | None, overrides: dict[str, Any] | None = None
) -> ExperimentSpec:
    """Load an experiment config file and apply flag overrides.

    The file holds ``schema_version`` and the ``dataset``, ``augment``,
    ``segmenter``, ``train`` and ``experiment`` sections; all are optional.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            msg = f"cannot read config {path}"
            raise ConfigError(msg) from exc
        if loaded is not None and not isinstance(loaded, dict):
            msg = f"config {path} is not a mapping"
            raise ConfigError(msg)
        raw = dict(loaded or {})
    if raw.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        msg = f"unsupported schema version {raw['schema_version']}"
        raise ConfigError(msg)
    experiment = raw.pop("experiment", None) or {}
    unknown = set(experiment) - set(_EXPERIMENT_KEYS)
    if unknown:
        msg = f"unknown experiment keys: {sorted(unknown)}"
        raise ConfigError(msg)
    raw |= experiment

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "seed":
            raw.setdefault("dataset", {})["root_seed"] = value
            raw.setdefault("train", {})["seed"] = value
            raw["replicate_seeds"] = [value]
        elif key == "fractions":
            raw["labeled_fractions"] = list(value)
        else:
            raw[key] = value
    return ExperimentSpec.model_validate(raw)


def labeled_subset(ids: Sequence[str], fraction: float, seed: int) -> list[str]:
    """Return the first ⌈fraction·N⌉ ids of a seed-shuffled order.

    Larger fractions always contain the smaller ones for the same seed.
    """
    count = math.ceil(round(fraction * len(ids), 9))
    order = rng_for(seed, SeedStream.SUBSET).permutation(len(ids))
    return [ids[index] for index in order[: max(1, count)]]


def _dataset(spec: ExperimentSpec, manifest: Path) -> tuple[Path, DatasetManifest]:
    root = manifest.parent if manifest.name == MANIFEST_FILE else manifest
    loaded = load_manifest(manifest)
    if tuple(loaded.image_size) != tuple(spec.segmenter.image_size):
        msg = f"dataset image size {loaded.image_size} differs from the segmenter's"
        raise GeometryError(msg)
    return root, loaded


def cmd_generate(spec: ExperimentSpec, out_dir: Path) -> DatasetManifest:
    """Generate the dataset described by the spec."""
    config = spec.dataset
    manifest = build_dataset(
        config.generator,
        config.n_labeled,
        config.n_unlabeled,
        config.root_seed,
        out_dir,
        n_validation=config.n_validation,
    )
    print(out_dir / MANIFEST_FILE)  # noqa: T201
    return manifest


def _run_cell(
    spec: ExperimentSpec,
    root: Path,
    manifest: DatasetManifest,
    out_dir: Path,
    fraction: float,
    seed: int,
    mode: TrainMode,
    ablation: Ablation,
    method: str,
) -> SweepCell:
    cell_spec = ExperimentSpec.model_validate(
        spec.model_dump() | {"train": spec.train.model_dump() | {"seed": seed}}
    )
    subset = labeled_subset(manifest.labeled_ids, fraction, seed)
    try:
        result = Trainer(cell_spec, manifest, root, mode, ablation).run(
            out_dir / f"fraction-{fraction:g}" / method / f"seed-{seed}", subset
        )
    except (MMTPSMError, ValueError) as exc:
        _LOGGER.error("cell %s/%g/%d failed: %s", method, fraction, seed, exc)
        return SweepCell(
            fraction=fraction, method=method, seed=seed, status="failed", error=str(exc)
        )
    return SweepCell(fraction=fraction, method=method, seed=seed, report=result.report)


def _aggregate(cells: Sequence[SweepCell]) -> list[SweepAggregate]:
    groups: dict[tuple[float, str], list[MetricReport]] = {}
    for cell in cells:
        key = (cell.fraction, cell.method)
        groups.setdefault(key, [])
        if cell.report is not None:
            groups[key].append(cell.report)
    aggregates = []
    for (fraction, method), reports in groups.items():
        mean: dict[str, float] = {}
        std: dict[str, float] = {}
        for column in MetricReport.CSV_COLUMNS:
            values = [
                getattr(r, column) for r in reports if getattr(r, column) is not None
            ]
            if values:
                mean[column] = float(np.mean(values))
                std[column] = float(np.std(values))
        aggregates.append(
            SweepAggregate(
                fraction=fraction,
                method=method,
                replicates=len(reports),
                mean=mean,
                std=std,
            )
        )
    return aggregates


def write_sweep(report: SweepReport, csv_path: Path, json_path: Path) -> None:
    """Write the per-cell CSV and the JSON report with aggregates."""
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for cell in report.cells:
            values = (
                cell.report.csv_row()
                if cell.report is not None
                else [""] * len(MetricReport.CSV_COLUMNS)
            )
            writer.writerow(
                [f"{cell.fraction:g}", cell.method, cell.seed, cell.status, *values]
            )
    json_path.write_text(report.model_dump_json(indent=2), encoding="utf-8")


def cmd_sweep(
    spec: ExperimentSpec,
    manifest: Path,
    out_dir: Path,
    modes: Sequence[TrainMode] = (TrainMode.SUPERVISED_ONLY, TrainMode.MMT_PSM),
) -> SweepReport:
    """Train every (fraction, seed, method) cell and report the metrics."""
    root, loaded = _dataset(spec, manifest)
    cells = [
        _run_cell(
            spec, root, loaded, out_dir, fraction, seed, mode, spec.ablation, mode.value
        )
        for fraction in spec.labeled_fractions
        for seed in spec.replicate_seeds
        for mode in modes
    ]
    report = SweepReport(cells=cells, aggregates=_aggregate(cells))
    write_sweep(report, out_dir / SWEEP_CSV, out_dir / SWEEP_JSON)
    return report


def cmd_ablate(spec: ExperimentSpec, manifest: Path, out_dir: Path) -> SweepReport:
    """Run the supervised baseline and each component ablation under the same seeds."""
    root, loaded = _dataset(spec, manifest)
    if spec.ablation_fraction is None:
        fraction = spec.labeled_fractions[0]
        _LOGGER.info(
            "no ablation_fraction set, ablating at the first labeled fraction %g",
            fraction,
        )
    else:
        fraction = spec.ablation_fraction
        _LOGGER.info("ablating at labeled fraction %g", fraction)
    variants = [
        (TrainMode.SUPERVISED_ONLY, Ablation.FULL, TrainMode.SUPERVISED_ONLY.value),
        (TrainMode.MMT_PSM, Ablation.FULL, TrainMode.MMT_PSM.value),
        *(
            (TrainMode.MMT_PSM, ablation, f"{TrainMode.MMT_PSM.value}_{ablation.value}")
            for ablation in (Ablation.NO_MGD, Ablation.NO_PSM)
        ),
    ]
    cells = [
        _run_cell(spec, root, loaded, out_dir, fraction, seed, mode, ablation, method)
        for seed in spec.replicate_seeds
        for mode, ablation, method in variants
    ]
    report = SweepReport(cells=cells, aggregates=_aggregate(cells))
    write_sweep(report, out_dir / ABLATION_CSV, out_dir / ABLATION_JSON)
    return report


def cmd_eval(
    spec: ExperimentSpec,
    manifest: Path,
    out_dir: Path,
    checkpoint: Path | None = None,
    oracle: bool = False,
) -> MetricReport:
    """Evaluate a checkpoint's student, or the ground truth, on validation scenes."""
    root, loaded = _dataset(spec, manifest)
    if not oracle and checkpoint is None:
        msg = "eval needs a checkpoint unless oracle mode is set"
        raise ConfigError(msg)
    params = (
        None if oracle or checkpoint is None else load_checkpoint(checkpoint).student
    )
    scene_ids = loaded.validation_ids or loaded.labeled_ids
    predictions, truths = [], []
    for scene_id in scene_ids:
        scene = load_scene(root, loaded, scene_id)
        truth = InstanceSet.from_scene(scene)
        truths.append(truth)
        predictions.append(
            truth
            if params is None
            else predict_instances(params, scene.image, spec.segmenter)
        )
    report = evaluate(predictions, truths, spec.iou_thresholds)
    write_report(report, out_dir)
    print(report.model_dump_json(indent=2))  # noqa: T201
    return report


def cmd_audit(spec: ExperimentSpec, out_dir: Path, seed: int = 0) -> bool:
    """Run the gradient audit and return if it passed."""
    report = gradient_audit(spec, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / AUDIT_JSON).write_text(
        report.model_dump_json(indent=2), encoding="utf-8"
    )
    for name, entry in report.entries.items():
        _LOGGER.info(
            "%s: %d coordinates, max relative error %.3e",
            name,
            entry.coordinates,
            entry.max_relative_error,
        )
    if not report.passed:
        _LOGGER.error("gradient audit failed, see %s", out_dir / AUDIT_JSON)
    return report.passed


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", type=Path, default=None, help="YAML experiment config"
    )
    common.add_argument(
        "--out-dir", type=Path, default=Path("out"), help="Output directory"
    )
    common.add_argument("--seed", type=int, default=None, help="Override every seed")
    common.add_argument("--verbose", action="store_true", help="Log debug messages")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument(
        "--manifest",
        type=Path,
        required=True,
        help="Dataset directory or manifest file",
    )

    parser = argparse.ArgumentParser(
        prog="mmtpsm", description="Semi-supervised cell instance segmentation"
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("generate", parents=[common], help="Write a synthetic dataset")

    sweep = commands.add_parser(
        "sweep", parents=[common, data], help="Labeled-fraction sweep"
    )
    sweep.add_argument(
        "--fractions", type=float, nargs="+", default=None, help="Labeled fractions"
    )
    sweep.add_argument(
        "--mode",
        choices=[m.value for m in TrainMode],
        default=None,
        help="Train only this method",
    )
    sweep.add_argument(
        "--ablation",
        choices=[a.value for a in Ablation],
        default=None,
        help="Component ablation",
    )

    ablate = commands.add_parser(
        "ablate", parents=[common, data], help="Component ablation"
    )
    ablate.add_argument(
        "--fraction",
        type=float,
        default=None,
        help="Labeled fraction of every ablation run",
    )

    evaluation = commands.add_parser(
        "eval", parents=[common, data], help="Evaluate a checkpoint"
    )
    evaluation.add_argument(
        "--checkpoint", type=Path, default=None, help="Checkpoint file"
    )
    evaluation.add_argument(
        "--oracle", action="store_true", help="Score the ground truth itself"
    )

    commands.add_parser(
        "audit", parents=[common], help="Finite-difference gradient audit"
    )
    return parser


def _dispatch(args: argparse.Namespace) -> ExitCode:
    overrides = {
        "seed": args.seed,
        "fractions": getattr(args, "fractions", None),
        "ablation": getattr(args, "ablation", None),
        "ablation_fraction": getattr(args, "fraction", None),
    }
    spec = load_spec(args.config, overrides)
    if args.command == "generate":
        cmd_generate(spec, args.out_dir)
    elif args.command == "sweep":
        modes = (
            (TrainMode(args.mode),)
            if args.mode
            else (TrainMode.SUPERVISED_ONLY, TrainMode.MMT_PSM)
        )
        cmd_sweep(spec, args.manifest, args.out_dir, modes)
    elif args.command == "ablate":
        cmd_ablate(spec, args.manifest, args.out_dir)
    elif args.command == "eval":
        cmd_eval(spec, args.manifest, args.out_dir, args.checkpoint, args.oracle)
    elif args.command == "audit" and not cmd_audit(spec, args.out_dir, args.seed or 0):
        return ExitCode.NUMERICAL_ABORT
    return ExitCode.OK


def main(argv: Sequence[str] | None = None) -> int:
    """Run the command line and return its exit code."""
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return int(_dispatch(args))
    except (ConfigError, ValidationError, ValueError) as exc:
        _LOGGER.error("invalid configuration: %s", exc)
        return int(ExitCode.CONFIG_ERROR)
    except (DatasetError, GeometryError) as exc:
        _LOGGER.error("data error: %s", exc)
        return int(ExitCode.DATA_ERROR)
    except NumericalAbortError as exc:
        _LOGGER.error("numerical abort: %s %s", exc, exc.components)
        return int(ExitCode.NUMERICAL_ABORT)
    except (CheckpointError, LayoutMismatchError) as exc:
        _LOGGER.error("checkpoint error: %s", exc)
        return int(ExitCode.CHECKPOINT_ERROR)


if __name__ == "__main__":
    sys.exit(main())
