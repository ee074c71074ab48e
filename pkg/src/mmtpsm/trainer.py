"""Training protocol: warmup, teacher creation, distillation and evaluation."""

from __future__ import annotations

import bisect
import csv
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path

import numpy as np
import torch

from mmtpsm.augmentor import make_views
from mmtpsm.const import Ablation, CellClass, ProposalSource, SeedStream, TrainMode
from mmtpsm.distillation import (
    MinedSelection,
    alpha_schedule,
    ema_update,
    lambda_schedule,
    prepare_targets,
    student_losses,
    total_loss,
)
from mmtpsm.helper import derive_seed, rng_for
from mmtpsm.metrics import InstanceSet, evaluate
from mmtpsm.models import (
    AuditEntry,
    AuditReport,
    DatasetManifest,
    ExperimentSpec,
    MetricReport,
    TelemetryRecord,
    TrainConfig,
)
from mmtpsm.segmenter import (
    Checkpoint,
    ParameterVector,
    build_targets,
    extract_features,
    init_parameters,
    load_checkpoint,
    predict_instances,
    propose,
    save_checkpoint,
    supervised_loss,
    supervised_terms,
)
from mmtpsm.synth import Scene, generate_scene, load_scene
from mmtpsm.types import NumericalAbortError

__all__ = [
    "RunResult",
    "RunState",
    "TelemetrySink",
    "Trainer",
    "gradient_audit",
    "learning_rate",
    "write_report",
]

_LOGGER = getLogger(__name__)

TELEMETRY_FILE = "telemetry.jsonl"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
FINAL_CHECKPOINT = "checkpoint-final.pt"


def learning_rate(t: int, config: TrainConfig) -> float:
    """Return the step learning rate at iteration t."""
    return config.learning_rates[bisect.bisect_right(config.lr_milestones, t)]


class TelemetrySink:
    """Collects telemetry records and appends them to a JSON-lines file."""

    def __init__(self, path: Path | None = None) -> None:
        """Initialize the sink, truncating the file if one is given."""
        self.path = path
        self.records: list[TelemetryRecord] = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("", encoding="utf-8")

    def write(self, record: TelemetryRecord) -> None:
        """Record one iteration."""
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as handle:
                line = record.model_dump_json(by_alias=True, exclude_none=True)
                handle.write(line + "\n")


@dataclass
class RunState:
    """Mutable state of a training run; the teacher exists from teacher_init_iter on."""

    t: int
    student: ParameterVector
    teacher: ParameterVector | None
    optimizer: torch.optim.Optimizer
    telemetry: TelemetrySink = field(default_factory=TelemetrySink)


@dataclass
class RunResult:
    """Outputs of a finished run."""

    checkpoint: Path
    telemetry: Path
    report: MetricReport
    state: RunState


def write_report(report: MetricReport, out_dir: Path) -> None:
    """Write a metric report as JSON and as a one-row CSV."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / REPORT_JSON).write_text(
        report.model_dump_json(indent=2), encoding="utf-8"
    )
    with (out_dir / REPORT_CSV).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(MetricReport.CSV_COLUMNS)
        writer.writerow(report.csv_row())


class Trainer:
    """Runs the mean teacher protocol on one dataset."""

    logger = getLogger(__name__)

    def __init__(
        self,
        spec: ExperimentSpec,
        manifest: DatasetManifest,
        root: Path,
        mode: TrainMode | None = None,
        ablation: Ablation | None = None,
    ) -> None:
        """Initialize the trainer for a dataset written under root."""
        self.spec = spec
        self.manifest = manifest
        self.root = root
        self.mode = spec.mode if mode is None else mode
        self.ablation = spec.ablation if ablation is None else ablation
        self._scenes: dict[str, Scene] = {}

    def scene(self, scene_id: str) -> Scene:
        """Return a dataset scene, reading it once."""
        if scene_id not in self._scenes:
            self._scenes[scene_id] = load_scene(self.root, self.manifest, scene_id)
        return self._scenes[scene_id]

    def initial_state(self, telemetry: TelemetrySink | None = None) -> RunState:
        """Return the state at t = 0."""
        train = self.spec.train
        student = init_parameters(
            self.spec.segmenter, derive_seed(train.seed, SeedStream.INIT)
        )
        student.values.requires_grad_(True)
        optimizer = torch.optim.SGD(
            [student.values],
            lr=train.learning_rates[0],
            momentum=train.momentum,
            weight_decay=train.weight_decay,
        )
        return RunState(0, student, None, optimizer, telemetry or TelemetrySink())

    def resume(self, path: Path, telemetry: TelemetrySink | None = None) -> RunState:
        """Return the state stored in a checkpoint."""
        checkpoint = load_checkpoint(path)
        state = self.initial_state(telemetry)
        state.student.check_layout(checkpoint.student)
        with torch.no_grad():
            state.student.values.copy_(checkpoint.student.values)
        state.optimizer.load_state_dict(checkpoint.optimizer_state)
        state.teacher = checkpoint.teacher
        state.t = checkpoint.t
        self.logger.info("resumed from %s at iteration %d", path, state.t)
        return state

    def checkpoint(self, state: RunState) -> Checkpoint:
        """Return a checkpoint of the state."""
        return Checkpoint(
            t=state.t,
            student=state.student,
            teacher=state.teacher,
            optimizer_state=state.optimizer.state_dict(),
            rng={"seed": self.spec.train.seed},
        )

    def _draw(self, ids: Sequence[str], stream: SeedStream, t: int) -> Scene:
        index = int(rng_for(self.spec.train.seed, stream, t).integers(len(ids)))
        return self.scene(ids[index])

    def train_step(
        self,
        state: RunState,
        labeled: Scene,
        unlabeled: Scene | None,
    ) -> RunState:
        """Take one optimizer step at iteration state.t and advance t.

        :param state: the run state, updated in place
        :param labeled: the annotated scene of this iteration
        :param unlabeled: the unlabeled scene, ignored by supervised_only runs
        :raises ~mmtpsm.types.NumericalAbortError: if any loss is not finite
        """
        train = self.spec.train
        t = state.t
        lr = learning_rate(t, train)
        for group in state.optimizer.param_groups:
            group["lr"] = lr
        state.optimizer.zero_grad()

        sup = supervised_loss(state.student, labeled, self.spec.segmenter)
        breakdown = sup.breakdown()
        lam = 0.0
        if self.mode is TrainMode.MMT_PSM:
            lam = lambda_schedule(
                t,
                train.total_iters,
                train.warmup_iters,
                train.rampup_iters,
                train.rampdown_iters,
            )
        psm: torch.Tensor | None = None
        mgd: torch.Tensor | None = None
        selection: MinedSelection | None = None
        if lam > 0.0 and state.teacher is not None and unlabeled is not None:
            views = make_views(
                unlabeled.image,
                derive_seed(train.seed, SeedStream.VIEWS, t),
                self.spec.augment,
                str(unlabeled.seed),
            )
            targets = prepare_targets(
                state.teacher, unlabeled.image, views, self.spec.segmenter, train
            )
            selection = targets.selection
            psm, mgd = student_losses(
                state.student, targets, views, self.spec.segmenter, train, self.ablation
            )
            total = total_loss(
                sup.total,
                psm,
                mgd,
                t,
                train.total_iters,
                train.gamma,
                train.warmup_iters,
                train.rampup_iters,
                train.rampdown_iters,
            )
        else:
            total = sup.total

        components = {**breakdown, "l_sup": float(sup.total.detach())}
        if psm is not None and mgd is not None:
            components |= {"l_psm": float(psm.detach()), "l_mgd": float(mgd.detach())}
        components["l_total"] = float(total.detach())
        if not all(math.isfinite(value) for value in components.values()):
            self.logger.error("non-finite loss at iteration %d: %s", t, components)
            msg = f"non-finite loss at iteration {t}"
            raise NumericalAbortError(msg, components)

        total.backward()
        state.optimizer.step()
        state.t = t + 1

        alpha = None
        if state.t == train.teacher_init_iter:
            state.teacher = state.student.clone()
            self.logger.info("teacher created at iteration %d", state.t)
        elif state.teacher is not None and state.t > train.teacher_init_iter:
            alpha = alpha_schedule(state.t, train.teacher_init_iter, train.alpha_max)
            state.teacher = ema_update(state.teacher, state.student, alpha)

        foreground = background = None
        if selection is not None:
            foreground = selection.s_foreground
            background = selection.kept_background
        state.telemetry.write(
            TelemetryRecord(
                t=t,
                lr=lr,
                lam=lam,
                alpha=alpha,
                s_foreground=foreground,
                kept_foreground=foreground,
                kept_background=background,
                l_cls=breakdown["cls"],
                l_reg=breakdown["reg"],
                l_seg=breakdown["seg"],
                l_rpn=breakdown["rpn"],
                l_sup=components["l_sup"],
                l_psm=components.get("l_psm"),
                l_mgd=components.get("l_mgd"),
                l_total=components["l_total"],
            )
        )
        return state

    def evaluate(
        self, student: ParameterVector, scene_ids: Sequence[str]
    ) -> MetricReport:
        """Evaluate the student on annotated scenes."""
        predictions, truths = [], []
        for scene_id in scene_ids:
            scene = self.scene(scene_id)
            predictions.append(
                predict_instances(student, scene.image, self.spec.segmenter)
            )
            truths.append(InstanceSet.from_scene(scene))
        return evaluate(predictions, truths, self.spec.iou_thresholds)

    def run(
        self,
        out_dir: Path,
        labeled_ids: Sequence[str] | None = None,
        resume: Path | None = None,
    ) -> RunResult:
        """Train to total_iters, checkpoint, and evaluate on the validation scenes.

        :param out_dir: directory for checkpoints, telemetry and the report
        :param labeled_ids: the labeled subset to train on, all labeled scenes if None
        :param resume: checkpoint to continue from
        """
        train = self.spec.train
        labeled = list(
            self.manifest.labeled_ids if labeled_ids is None else labeled_ids
        )
        if not labeled:
            msg = "a run needs at least one labeled scene"
            raise ValueError(msg)
        unlabeled = (
            list(self.manifest.unlabeled_ids) if self.mode is TrainMode.MMT_PSM else []
        )
        if self.mode is TrainMode.MMT_PSM and not unlabeled:
            self.logger.warning("no unlabeled scenes, training is supervised only")

        sink = TelemetrySink(out_dir / TELEMETRY_FILE)
        state = (
            self.initial_state(sink) if resume is None else self.resume(resume, sink)
        )
        self.logger.info(
            "training %s (%s) on %d labeled and %d unlabeled scenes",
            self.mode.value,
            self.ablation.value,
            len(labeled),
            len(unlabeled),
        )
        while state.t < train.total_iters:
            unlabeled_scene = (
                self._draw(unlabeled, SeedStream.UNLABELED, state.t)
                if unlabeled
                else None
            )
            self.train_step(
                state, self._draw(labeled, SeedStream.LABELED, state.t), unlabeled_scene
            )
            if state.t % train.checkpoint_every == 0 and state.t < train.total_iters:
                path = out_dir / f"checkpoint-{state.t:06d}.pt"
                save_checkpoint(self.checkpoint(state), path)
        final = out_dir / FINAL_CHECKPOINT
        save_checkpoint(self.checkpoint(state), final)

        validation = list(self.manifest.validation_ids)
        if not validation:
            self.logger.warning(
                "no validation scenes, evaluating on the labeled subset"
            )
            validation = labeled
        report = self.evaluate(state.student, validation)
        write_report(report, out_dir)
        self.logger.info("finished at iteration %d: %s", state.t, report.csv_row())
        return RunResult(final, sink.path or out_dir / TELEMETRY_FILE, report, state)


def _relative_errors(
    loss: Callable[[torch.Tensor], torch.Tensor],
    values: torch.Tensor,
    count: int,
    step: float,
    seed: int,
) -> tuple[int, float]:
    """Compare autograd to central differences on sampled coordinates."""
    point = values.detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(loss(point), point)
    grad = grad.detach()
    magnitude = grad.abs()
    # coordinates with a tiny gradient only measure truncation error
    candidates = np.flatnonzero(
        ((magnitude >= 1e-2 * magnitude.max()) & (magnitude > 0)).numpy()
    )
    if candidates.size == 0:
        return 0, 0.0
    chosen = rng_for(seed).choice(
        candidates, size=min(count, candidates.size), replace=False
    )
    worst = 0.0
    with torch.no_grad():
        for index in np.sort(chosen):
            shifted = values.detach().clone()
            shifted[index] += step
            upper = float(loss(shifted))
            shifted[index] -= 2 * step
            lower = float(loss(shifted))
            numeric = (upper - lower) / (2 * step)
            analytic = float(grad[index])
            scale = max(abs(analytic), abs(numeric), 1e-6)
            worst = max(worst, abs(analytic - numeric) / scale)
    return int(chosen.size), worst


def gradient_audit(
    spec: ExperimentSpec,
    seed: int = 0,
    coordinates: int = 20,
    step: float = 1e-4,
    tolerance: float = 1e-4,
) -> AuditReport:
    """Check every loss gradient against central finite differences.

    Proposals and teacher outputs are computed once and held fixed, so each
    loss is a smooth function of the student parameters alone.
    """
    segmenter = spec.segmenter
    train = spec.train
    scene = generate_scene(
        derive_seed(seed, SeedStream.AUDIT, 0), spec.dataset.generator
    )
    student = init_parameters(segmenter, derive_seed(seed, SeedStream.AUDIT, 1))
    teacher = init_parameters(segmenter, derive_seed(seed, SeedStream.AUDIT, 2))
    layout = student.layout

    with torch.no_grad():
        proposals = propose(
            student,
            extract_features(student, scene.image, segmenter),
            segmenter,
            ProposalSource.STUDENT_RPN,
        )
    supervised = build_targets(proposals, scene, segmenter)
    views = make_views(
        scene.image, derive_seed(seed, SeedStream.AUDIT, 3), spec.augment
    )
    distill = prepare_targets(teacher, scene.image, views, segmenter, train)
    if distill.selection.kept_indices.size == 0:
        distill.selection = MinedSelection(np.arange(len(distill.pseudo.proposals)), 0)
    if not any(mask.any() for mask in distill.masks):
        union = np.zeros(scene.image.shape[:2], dtype=bool)
        for instance in scene.instances_of(CellClass.CYTOPLASM):
            union |= instance.mask
        height, width = union.shape
        distill.masks = [
            union.reshape(height // s, s, width // s, s).any(axis=(1, 3))
            for s in segmenter.strides
        ]

    def supervised_term(name: str) -> Callable[[torch.Tensor], torch.Tensor]:
        def loss(values: torch.Tensor) -> torch.Tensor:
            params = ParameterVector(values, layout)
            pyramid = extract_features(params, scene.image, segmenter)
            return supervised_terms(params, pyramid, supervised, segmenter)[name]

        return loss

    def psm(values: torch.Tensor) -> torch.Tensor:
        params = ParameterVector(values, layout)
        losses = student_losses(
            params, distill, views, segmenter, train, Ablation.NO_MGD
        )
        return losses[0]

    def mgd(values: torch.Tensor) -> torch.Tensor:
        params = ParameterVector(values, layout)
        losses = student_losses(
            params, distill, views, segmenter, train, Ablation.NO_PSM
        )
        return losses[1]

    losses = {
        "cls": supervised_term("cls"),
        "reg": supervised_term("reg"),
        "seg": supervised_term("seg"),
        "psm": psm,
        "mgd": mgd,
    }
    entries = {}
    for offset, (name, loss) in enumerate(losses.items()):
        used, worst = _relative_errors(
            loss,
            student.values,
            coordinates,
            step,
            derive_seed(seed, SeedStream.AUDIT, 10 + offset),
        )
        entries[name] = AuditEntry(coordinates=used, max_relative_error=worst)
        _LOGGER.debug("audited %s on %d coordinates: %.3e", name, used, worst)
        if used < coordinates:
            _LOGGER.warning(
                "%s has only %d of %d coordinates with a usable gradient",
                name,
                used,
                coordinates,
            )

    teacher_values = teacher.values.detach().clone().requires_grad_(True)
    watched = ParameterVector(teacher_values, layout)
    targets = prepare_targets(watched, scene.image, views, segmenter, train)
    targets.masks = distill.masks
    student_values = student.values.detach().clone().requires_grad_(True)
    _, teacher_mgd = student_losses(
        ParameterVector(student_values, layout),
        targets,
        views,
        segmenter,
        train,
        Ablation.NO_PSM,
    )
    teacher_grad, _ = torch.autograd.grad(
        teacher_mgd, [teacher_values, student_values], allow_unused=True
    )
    teacher_max = 0.0 if teacher_grad is None else float(teacher_grad.abs().max())
    return AuditReport(
        tolerance=tolerance,
        min_coordinates=coordinates,
        entries=entries,
        teacher_gradient_max_abs=teacher_max,
    )
