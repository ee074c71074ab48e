"""Mean teacher distillation: schedules, pseudo-labels, mining and losses."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass
from logging import getLogger

import numpy as np
import numpy.typing as npt
import torch

from mmtpsm.augmentor import ViewSet, map_boxes
from mmtpsm.const import LOG_FLOOR, NUM_CLASSES, Ablation, CellClass, SharpenConvention
from mmtpsm.helper import BoolArray, FloatArray, paste_mask
from mmtpsm.models import SegmenterConfig, TrainConfig
from mmtpsm.segmenter import (
    FeaturePyramid,
    ParameterVector,
    ProposalBatch,
    adapt,
    classify,
    extract_features,
    propose,
    roi_extract,
    segment,
)
from mmtpsm.types import GeometryError, LayoutMismatchError, NumericalAbortError

__all__ = [
    "DistillationTargets",
    "MinedSelection",
    "PseudoLabelSet",
    "UnsupervisedLoss",
    "alpha_schedule",
    "class_weights",
    "ema_update",
    "ensemble_pseudo_label",
    "lambda_schedule",
    "mgd_loss",
    "mine_samples",
    "perturbation_variance",
    "prepare_targets",
    "psm_loss",
    "pseudo_label",
    "semantic_mask",
    "sharpen",
    "student_losses",
    "total_loss",
    "unsupervised_loss",
]

_LOGGER = getLogger(__name__)


def ema_update(
    teacher: ParameterVector, student: ParameterVector, alpha: float
) -> ParameterVector:
    """Return alpha·teacher + (1 − alpha)·student; the student is untouched."""
    if not 0.0 <= alpha <= 1.0:
        msg = f"alpha {alpha} outside [0, 1]"
        raise ValueError(msg)
    teacher.check_layout(student)
    with torch.no_grad():
        values = (
            alpha * teacher.values.detach() + (1.0 - alpha) * student.values.detach()
        )
    return ParameterVector(values, dict(teacher.layout))


def alpha_schedule(
    t: int, teacher_init_iter: int = 990, alpha_max: float = 0.99
) -> float:
    """Return the EMA decay, small right after the teacher is created."""
    if t <= teacher_init_iter:
        msg = f"no teacher update before iteration {teacher_init_iter + 1}, got {t}"
        raise ValueError(msg)
    return max(0.0, min(1.0 - 1.0 / (t - teacher_init_iter), alpha_max))


def lambda_schedule(
    t: int,
    total_iters: int,
    warmup_iters: int = 1000,
    rampup_iters: int = 250,
    rampdown_iters: int = 250,
) -> float:
    """Return the unsupervised loss weight.

    Zero during warmup, a Gaussian ramp up to one, a plateau, and a Gaussian
    ramp down over the last rampdown_iters iterations.
    """
    if total_iters < warmup_iters + rampup_iters + rampdown_iters:
        msg = (
            f"{total_iters} iterations cannot hold warmup {warmup_iters}, "
            f"ramp-up {rampup_iters} and ramp-down {rampdown_iters}"
        )
        raise ValueError(msg)
    if not 0 <= t <= total_iters:
        msg = f"iteration {t} outside [0, {total_iters}]"
        raise ValueError(msg)
    if t < warmup_iters:
        return 0.0
    if t <= warmup_iters + rampup_iters:
        phase = 1.0 - (t - warmup_iters) / rampup_iters
        return math.exp(-5.0 * phase * phase)
    if t >= total_iters - rampdown_iters:
        phase = 1.0 - (total_iters - t) / rampdown_iters
        return math.exp(-12.0 * phase * phase)
    return 1.0


def ensemble_pseudo_label(per_view_dists: Sequence[FloatArray]) -> FloatArray:
    """Average the class distributions of K views, proposal by proposal."""
    if len(per_view_dists) < 2:
        msg = f"need at least two views, got {len(per_view_dists)}"
        raise ValueError(msg)
    shapes = {np.shape(dists) for dists in per_view_dists}
    if len(shapes) != 1:
        msg = f"views disagree in proposal count: {sorted(shapes)}"
        raise ValueError(msg)
    return np.mean(np.asarray(per_view_dists, dtype=np.float64), axis=0)


def sharpen(
    dist: FloatArray,
    temperature: float,
    convention: SharpenConvention = SharpenConvention.RECIPROCAL,
) -> FloatArray:
    """Raise a distribution to a power and renormalize along the last axis.

    RECIPROCAL uses the exponent 1/temperature, so temperatures below one
    lower the entropy. LITERAL uses the temperature itself as the exponent.
    """
    if temperature <= 0:
        msg = f"temperature must be positive, got {temperature}"
        raise ValueError(msg)
    exponent = (
        1.0 / temperature
        if convention is SharpenConvention.RECIPROCAL
        else temperature
    )
    dist = np.asarray(dist, dtype=np.float64)
    if exponent == 1.0:
        return dist.copy()
    powered = np.power(dist, exponent)
    return powered / powered.sum(axis=-1, keepdims=True)


def perturbation_variance(
    per_view_dists: Sequence[FloatArray], mean_dist: FloatArray | None = None
) -> FloatArray:
    """Return the class-summed variance of each proposal over the K views.

    Computed from pairwise differences, (1/2K²)·Σ_k Σ_l (p_k − p_l)², which
    equals the spread around the mean and is exactly zero for equal views.
    """
    if len(per_view_dists) < 2:
        msg = f"need at least two views, got {len(per_view_dists)}"
        raise ValueError(msg)
    stacked = np.asarray(per_view_dists, dtype=np.float64)
    if mean_dist is not None and np.shape(mean_dist) != stacked.shape[1:]:
        msg = "mean distribution does not match the views"
        raise ValueError(msg)
    views = stacked.shape[0]
    diffs = stacked[:, None] - stacked[None, :]
    return (diffs * diffs).sum(axis=(0, 1, 3)) / (2 * views * views)


@dataclass
class PseudoLabelSet:
    """Teacher ensemble statistics for every proposal of one scene."""

    mean_dist: FloatArray
    sharpened_dist: FloatArray
    hard_label: npt.NDArray[np.int64]
    variance: FloatArray
    proposals: ProposalBatch


def pseudo_label(
    per_view_dists: Sequence[FloatArray],
    proposals: ProposalBatch,
    temperature: float = 0.5,
    convention: SharpenConvention = SharpenConvention.RECIPROCAL,
) -> PseudoLabelSet:
    """Build soft, hard and variance labels from the teacher's K views."""
    mean_dist = ensemble_pseudo_label(per_view_dists)
    if mean_dist.shape[0] != len(proposals):
        msg = f"{mean_dist.shape[0]} predictions for {len(proposals)} proposals"
        raise ValueError(msg)
    return PseudoLabelSet(
        mean_dist=mean_dist,
        sharpened_dist=sharpen(mean_dist, temperature, convention),
        hard_label=mean_dist.argmax(axis=-1).astype(np.int64),
        variance=perturbation_variance(per_view_dists, mean_dist),
        proposals=proposals,
    )


@dataclass
class MinedSelection:
    """Proposals that take part in the consistency loss."""

    kept_indices: npt.NDArray[np.int64]
    s_foreground: int

    @property
    def kept_background(self) -> int:
        """Return the number of kept background proposals."""
        return int(self.kept_indices.size) - self.s_foreground


def mine_samples(pseudo: PseudoLabelSet) -> MinedSelection:
    """Keep every foreground proposal plus as many of the most sensitive backgrounds.

    Background proposals are ranked by descending variance; equal variances
    keep the lower index.
    """
    foreground = np.flatnonzero(pseudo.hard_label != CellClass.BACKGROUND)
    background = np.flatnonzero(pseudo.hard_label == CellClass.BACKGROUND)
    order = np.argsort(-pseudo.variance[background], kind="stable")
    chosen = background[order[: foreground.size]]
    kept = np.sort(np.concatenate([foreground, chosen])).astype(np.int64)
    return MinedSelection(kept_indices=kept, s_foreground=int(foreground.size))


def class_weights(w_background: float = 1.5) -> FloatArray:
    """Return the per-class consistency weights indexed by class id."""
    weights = np.ones(NUM_CLASSES)
    weights[CellClass.BACKGROUND] = w_background
    return weights


def psm_loss(
    student_dists: Sequence[torch.Tensor],
    targets: FloatArray,
    hard_labels: npt.NDArray[np.int64],
    weights: FloatArray | None = None,
) -> torch.Tensor:
    """Weighted cross-entropy of student views against sharpened targets.

    Each view's loss is the mean over the kept proposals; views are averaged.
    """
    weights = class_weights() if weights is None else np.asarray(weights)
    targets = np.asarray(targets, dtype=np.float64)
    if not student_dists:
        msg = "need at least one student view"
        raise ValueError(msg)
    for dists in student_dists:
        if tuple(dists.shape) != targets.shape:
            msg = (
                f"student shape {tuple(dists.shape)} "
                f"does not match targets {targets.shape}"
            )
            raise ValueError(msg)
    if targets.shape[0] == 0:
        return torch.stack([dists.sum() for dists in student_dists]).sum() * 0.0
    target = torch.as_tensor(targets, dtype=torch.float64)
    weight = torch.as_tensor(weights[np.asarray(hard_labels)], dtype=torch.float64)
    per_view = [
        (weight * -(target * dists.clamp_min(LOG_FLOOR).log()).sum(dim=-1)).mean()
        for dists in student_dists
    ]
    return torch.stack(per_view).mean()


def semantic_mask(
    mask_probs: FloatArray,
    boxes: FloatArray,
    image_size: tuple[int, int],
    strides: Sequence[int],
    threshold: float = 0.5,
) -> list[BoolArray]:
    """Union the pasted instance masks and max-pool them to every stage."""
    height, width = image_size
    union = np.zeros((height, width), dtype=bool)
    for probs, box in zip(mask_probs, np.asarray(boxes).reshape(-1, 4), strict=True):
        union |= paste_mask(probs, box, image_size, threshold)
    return [
        union.reshape(height // stride, stride, width // stride, stride).any(
            axis=(1, 3)
        )
        for stride in strides
    ]


def mgd_loss(
    teacher_adapted: FeaturePyramid,
    student_adapted: FeaturePyramid,
    masks: Sequence[BoolArray],
) -> torch.Tensor:
    """Masked squared feature difference, normalized per stage.

    Each stage contributes the masked sum over cells and channels divided by
    the masked cell count and its channel count; the stages are averaged.
    Stages without masked cells contribute zero.
    """
    if len(teacher_adapted.stages) != len(student_adapted.stages) or len(masks) != len(
        teacher_adapted.stages
    ):
        msg = "pyramids and masks disagree in stage count"
        raise GeometryError(msg)
    terms = []
    for teacher, student, mask in zip(
        teacher_adapted.stages, student_adapted.stages, masks, strict=True
    ):
        if teacher.shape != student.shape or tuple(mask.shape) != tuple(
            teacher.shape[1:]
        ):
            msg = f"stage shapes differ: {tuple(teacher.shape)}, {tuple(student.shape)}"
            raise GeometryError(msg)
        selected = torch.as_tensor(np.asarray(mask, dtype=bool))
        cells = int(selected.sum())
        if cells == 0:
            terms.append(student.sum() * 0.0)
            continue
        diff = teacher.detach()[:, selected] - student[:, selected]
        terms.append((diff * diff).sum() / (cells * teacher.shape[0]))
    return torch.stack(terms).sum() / len(terms)


def total_loss(
    l_sup: torch.Tensor | float,
    l_psm: torch.Tensor | float,
    l_mgd: torch.Tensor | float,
    t: int,
    total_iters: int,
    gamma: float = 5.0,
    warmup_iters: int = 1000,
    rampup_iters: int = 250,
    rampdown_iters: int = 250,
) -> torch.Tensor | float:
    """Return l_sup + λ(t)·(l_psm + γ·l_mgd); exactly l_sup while λ is zero."""
    components = {"l_sup": l_sup, "l_psm": l_psm, "l_mgd": l_mgd}
    values = {name: float(value) for name, value in components.items()}
    if not all(math.isfinite(value) for value in values.values()):
        msg = f"non-finite loss at iteration {t}"
        raise NumericalAbortError(msg, values)
    lam = lambda_schedule(t, total_iters, warmup_iters, rampup_iters, rampdown_iters)
    if lam == 0.0:
        return l_sup
    return l_sup + lam * (l_psm + gamma * l_mgd)


@dataclass
class DistillationTargets:
    """Teacher-side constants of one unlabeled scene."""

    pseudo: PseudoLabelSet
    selection: MinedSelection
    masks: list[BoolArray]
    teacher_adapted: FeaturePyramid

    @property
    def kept_foreground(self) -> npt.NDArray[np.int64]:
        """Return the kept proposals with a foreground hard label."""
        kept = self.selection.kept_indices
        return kept[self.pseudo.hard_label[kept] != CellClass.BACKGROUND]


@dataclass
class UnsupervisedLoss:
    """Consistency and distillation losses of one unlabeled scene."""

    psm: torch.Tensor
    mgd: torch.Tensor
    targets: DistillationTargets


def prepare_targets(
    teacher: ParameterVector,
    image: FloatArray,
    views: ViewSet,
    segmenter_config: SegmenterConfig,
    train_config: TrainConfig,
) -> DistillationTargets:
    """Run the teacher on the scene and its K views; nothing here needs gradients."""
    image_size = segmenter_config.image_size
    with torch.no_grad():
        pyramid = extract_features(teacher, image, segmenter_config)
        proposals = propose(teacher, pyramid, segmenter_config)
        per_view = []
        for view, record in views.teacher_views:
            view_pyramid = extract_features(teacher, view, segmenter_config)
            boxes = map_boxes(record, proposals.boxes, image_size)
            patches = roi_extract(view_pyramid, boxes, segmenter_config.roi_size)
            per_view.append(classify(teacher, patches).numpy())
        pseudo = pseudo_label(
            per_view,
            proposals,
            train_config.temperature,
            train_config.sharpen_convention,
        )
        selection = mine_samples(pseudo)
        kept = selection.kept_indices
        foreground = kept[pseudo.hard_label[kept] != CellClass.BACKGROUND]
        patches = roi_extract(
            pyramid, proposals.boxes[foreground], segmenter_config.roi_size
        )
        mask_probs = segment(teacher, patches, segmenter_config.mask_size).numpy()
        teacher_adapted = adapt(teacher, pyramid).detach()
    masks = semantic_mask(
        mask_probs,
        proposals.boxes[foreground],
        tuple(segmenter_config.image_size),
        segmenter_config.strides,
    )
    _LOGGER.debug(
        "kept %d foreground and %d background of %d proposals",
        selection.s_foreground,
        selection.kept_background,
        len(proposals),
    )
    return DistillationTargets(pseudo, selection, masks, teacher_adapted)


def _unflip(pyramid: FeaturePyramid) -> FeaturePyramid:
    stages = [torch.flip(stage, dims=[-1]) for stage in pyramid.stages]
    return FeaturePyramid(stages, pyramid.strides)


def student_losses(
    student: ParameterVector,
    targets: DistillationTargets,
    views: ViewSet,
    segmenter_config: SegmenterConfig,
    train_config: TrainConfig,
    ablation: Ablation = Ablation.FULL,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return the (psm, mgd) losses of the student's L views against the targets."""
    image_size = segmenter_config.image_size
    kept = targets.selection.kept_indices
    boxes = targets.pseudo.proposals.boxes[kept]
    dists, distances = [], []
    for view, record in views.student_views:
        pyramid = extract_features(student, view, segmenter_config)
        if ablation is not Ablation.NO_PSM and kept.size:
            patches = roi_extract(
                pyramid, map_boxes(record, boxes, image_size), segmenter_config.roi_size
            )
            dists.append(classify(student, patches))
        if ablation is not Ablation.NO_MGD:
            adapted = adapt(student, pyramid)
            if record.flipped:
                adapted = _unflip(adapted)
            distances.append(mgd_loss(targets.teacher_adapted, adapted, targets.masks))
    zero = student.values.sum() * 0.0
    psm = zero
    if dists:
        psm = psm_loss(
            dists,
            targets.pseudo.sharpened_dist[kept],
            targets.pseudo.hard_label[kept],
            class_weights(train_config.w_background),
        )
    mgd = torch.stack(distances).mean() if distances else zero
    return psm, mgd


def unsupervised_loss(
    student: ParameterVector,
    teacher: ParameterVector,
    image: FloatArray,
    views: ViewSet,
    segmenter_config: SegmenterConfig,
    train_config: TrainConfig,
    ablation: Ablation = Ablation.FULL,
) -> UnsupervisedLoss:
    """Return the consistency and distillation losses of one unlabeled scene."""
    if teacher.layout != student.layout:
        msg = "teacher and student layouts differ"
        raise LayoutMismatchError(msg)
    targets = prepare_targets(teacher, image, views, segmenter_config, train_config)
    psm, mgd = student_losses(
        student, targets, views, segmenter_config, train_config, ablation
    )
    return UnsupervisedLoss(psm, mgd, targets)
