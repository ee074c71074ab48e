"""A minimal differentiable two-stage instance segmenter.

All functions are pure in (params, inputs): the model is a flat float64
parameter vector plus a layout, and every forward step reads its weights
through views into that vector. This makes copying, averaging and
checkpointing the model trivial and lets autograd produce one flat gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from logging import getLogger
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt
import torch
import torch.nn.functional as F

from mmtpsm.const import CHECKPOINT_VERSION, NUM_CLASSES, ProposalSource
from mmtpsm.helper import (
    FloatArray,
    box_iou,
    clip_boxes,
    decode_boxes,
    encode_boxes,
    greedy_nms,
    paste_mask,
    resample_mask,
)
from mmtpsm.metrics import InstanceSet
from mmtpsm.models import SegmenterConfig
from mmtpsm.synth import Scene
from mmtpsm.types import (
    CheckpointError,
    GeometryError,
    LayoutMismatchError,
    MissingAnnotationsError,
)

__all__ = [
    "Checkpoint",
    "FeaturePyramid",
    "ParameterVector",
    "ProposalBatch",
    "SupervisedLoss",
    "SupervisedTargets",
    "adapt",
    "build_layout",
    "build_targets",
    "classify",
    "classify_logits",
    "extract_features",
    "init_parameters",
    "load_checkpoint",
    "mask_logits",
    "predict_instances",
    "propose",
    "revise_box",
    "roi_extract",
    "save_checkpoint",
    "segment",
    "supervised_loss",
    "supervised_terms",
]

_LOGGER = getLogger(__name__)

DTYPE = torch.float64
SMOOTH_L1_BETA = 1.0


@dataclass(frozen=True)
class Segment:
    """Location of one named tensor inside the flat parameter vector."""

    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        """Return the number of scalars in the segment."""
        return math.prod(self.shape)


@dataclass
class ParameterVector:
    """Flat ordered parameters with a named-segment layout."""

    values: torch.Tensor
    layout: dict[str, Segment]

    def __getitem__(self, name: str) -> torch.Tensor:
        """Return a view of one named segment in its tensor shape."""
        segment = self.layout[name]
        return self.values.narrow(0, segment.offset, segment.size).view(segment.shape)

    def clone(self) -> ParameterVector:
        """Return a detached copy."""
        return ParameterVector(self.values.detach().clone(), dict(self.layout))

    def check_layout(self, other: ParameterVector) -> None:
        """Raise if other does not share this layout."""
        if self.layout != other.layout or self.values.shape != other.values.shape:
            msg = "parameter layouts differ"
            raise LayoutMismatchError(msg)

    def is_finite(self) -> bool:
        """Return if every value is finite."""
        return bool(torch.isfinite(self.values).all())


@dataclass
class FeaturePyramid:
    """Feature maps of shape (C_t, H_t, W_t) with their input strides."""

    stages: list[torch.Tensor]
    strides: tuple[int, ...]

    def detach(self) -> FeaturePyramid:
        """Return the pyramid cut from the autograd graph."""
        return FeaturePyramid([stage.detach() for stage in self.stages], self.strides)


@dataclass
class ProposalBatch:
    """Candidate boxes in input-image coordinates."""

    boxes: FloatArray
    source: ProposalSource = ProposalSource.TEACHER_RPN

    def __len__(self) -> int:
        """Return the number of proposals."""
        return int(self.boxes.shape[0])


def build_layout(config: SegmenterConfig) -> dict[str, Segment]:
    """Return the parameter layout for a config; equal configs, equal layouts."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    previous_channels, previous_stride = 3, 1
    for index, (channels, stride) in enumerate(
        zip(config.channels, config.strides, strict=True)
    ):
        kernel = stride // previous_stride
        shape = (channels, previous_channels, kernel, kernel)
        shapes.append((f"stem.{index}.weight", shape))
        shapes.append((f"stem.{index}.bias", (channels,)))
        previous_channels, previous_stride = channels, stride
    for index, channels in enumerate(config.channels):
        shapes.append((f"rpn.{index}.weight", (1, channels)))
        shapes.append((f"rpn.{index}.bias", (1,)))
    pooled = sum(config.channels)
    roi_features = pooled * config.roi_size * config.roi_size
    shapes += [
        ("head.fc.weight", (config.hidden, roi_features)),
        ("head.fc.bias", (config.hidden,)),
        ("head.cls.weight", (NUM_CLASSES, config.hidden)),
        ("head.cls.bias", (NUM_CLASSES,)),
        ("head.box.weight", (4, config.hidden)),
        ("head.box.bias", (4,)),
        ("head.mask.weight", (1, pooled, 3, 3)),
        ("head.mask.bias", (1,)),
    ]
    for index, channels in enumerate(config.channels):
        shapes.append((f"adapt.{index}.weight", (channels // 2, channels)))
        shapes.append((f"adapt.{index}.bias", (channels // 2,)))

    layout: dict[str, Segment] = {}
    offset = 0
    for name, shape in shapes:
        layout[name] = Segment(offset, shape)
        offset += math.prod(shape)
    return layout


def init_parameters(config: SegmenterConfig, seed: int) -> ParameterVector:
    """Draw fan-in scaled normal weights and zero biases."""
    layout = build_layout(config)
    total = sum(segment.size for segment in layout.values())
    values = torch.zeros(total, dtype=DTYPE)
    generator = torch.Generator().manual_seed(seed % 2**63)
    params = ParameterVector(values, layout)
    for name, segment in layout.items():
        if name.endswith(".bias"):
            continue
        fan_in = math.prod(segment.shape[1:])
        scale = config.init_scale / math.sqrt(fan_in)
        params[name].copy_(
            torch.randn(segment.shape, generator=generator, dtype=DTYPE) * scale
        )
    return params


def _image_tensor(image: Any, config: SegmenterConfig) -> torch.Tensor:
    tensor = torch.as_tensor(np.asarray(image), dtype=DTYPE)
    if tuple(tensor.shape) != (*config.image_size, 3):
        msg = f"image shape {tuple(tensor.shape)} does not match {config.image_size}"
        raise GeometryError(msg)
    return tensor.permute(2, 0, 1).unsqueeze(0)


def extract_features(
    params: ParameterVector, image: Any, config: SegmenterConfig
) -> FeaturePyramid:
    """Run the strided filter blocks and return one map per stage."""
    x = _image_tensor(image, config)
    stages = []
    previous_stride = 1
    for index, stride in enumerate(config.strides):
        kernel = stride // previous_stride
        weight, bias = params[f"stem.{index}.weight"], params[f"stem.{index}.bias"]
        x = torch.tanh(F.conv2d(x, weight, bias, stride=kernel))
        stages.append(x[0])
        previous_stride = stride
    return FeaturePyramid(stages, tuple(config.strides))


@lru_cache(maxsize=8)
def _anchor_grid(
    image_size: tuple[int, int],
    strides: tuple[int, ...],
    anchor_sizes: tuple[int, ...],
) -> FloatArray:
    boxes = []
    for stride, size in zip(strides, anchor_sizes, strict=True):
        rows, cols = np.mgrid[0 : image_size[0] // stride, 0 : image_size[1] // stride]
        cx = (cols.ravel() + 0.5) * stride
        cy = (rows.ravel() + 0.5) * stride
        half = size / 2
        boxes.append(np.stack([cx - half, cy - half, cx + half, cy + half], axis=1))
    grid = clip_boxes(np.concatenate(boxes), image_size)
    grid.flags.writeable = False
    return grid


def anchors(config: SegmenterConfig) -> FloatArray:
    """Return the fixed anchor grid, one anchor per cell of every stage."""
    return _anchor_grid(
        tuple(config.image_size), tuple(config.strides), tuple(config.anchor_sizes)
    )


def objectness(params: ParameterVector, pyramid: FeaturePyramid) -> torch.Tensor:
    """Return the objectness logit of every anchor, stage by stage, row-major."""
    scores = []
    for index, stage in enumerate(pyramid.stages):
        flat = stage.reshape(stage.shape[0], -1)
        weight, bias = params[f"rpn.{index}.weight"], params[f"rpn.{index}.bias"]
        scores.append((weight @ flat + bias[:, None])[0])
    return torch.cat(scores)


def propose(
    params: ParameterVector,
    pyramid: FeaturePyramid,
    config: SegmenterConfig,
    source: ProposalSource = ProposalSource.TEACHER_RPN,
) -> ProposalBatch:
    """Score the anchor grid and keep the top boxes after overlap suppression."""
    with torch.no_grad():
        scores = objectness(params, pyramid).numpy()
    grid = anchors(config)
    order = np.argsort(-scores, kind="stable")[: config.pre_nms_top_n]
    keep = greedy_nms(
        grid[order], scores[order], config.proposal_iou, config.num_proposals
    )
    return ProposalBatch(grid[order[keep]].copy(), source)


def roi_extract(
    pyramid: FeaturePyramid,
    boxes: FloatArray,
    roi_size: int = 7,
) -> torch.Tensor:
    """Bilinearly sample an r×r patch per box from every stage.

    Sample points sit at the bin centers of the box; stages are concatenated
    along channels. A single box gives (C, r, r), a box array (N, C, r, r).
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    single = boxes.ndim == 1
    boxes = boxes.reshape(-1, 4)
    if ((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1])).any():
        msg = "cannot extract features of a zero-area box"
        raise GeometryError(msg)
    centers = torch.arange(roi_size, dtype=DTYPE).add(0.5).div(roi_size)
    patches = []
    for stage, stride in zip(pyramid.stages, pyramid.strides, strict=True):
        _, height, width = stage.shape
        scaled = torch.as_tensor(boxes / stride, dtype=DTYPE)
        xs = scaled[:, 0:1] + centers[None, :] * (scaled[:, 2:3] - scaled[:, 0:1]) - 0.5
        ys = scaled[:, 1:2] + centers[None, :] * (scaled[:, 3:4] - scaled[:, 1:2]) - 0.5
        xs = xs.clamp(0.0, width - 1.0)
        ys = ys.clamp(0.0, height - 1.0)
        x0 = xs.floor().long()
        y0 = ys.floor().long()
        x1 = (x0 + 1).clamp(max=width - 1)
        y1 = (y0 + 1).clamp(max=height - 1)
        wx = (xs - x0.to(DTYPE))[:, None, :]
        wy = (ys - y0.to(DTYPE))[:, :, None]

        def gather(
            rows: torch.Tensor, cols: torch.Tensor, feat: torch.Tensor = stage
        ) -> torch.Tensor:
            return feat[:, rows[:, :, None], cols[:, None, :]]

        sampled = (
            gather(y0, x0) * ((1 - wy) * (1 - wx))
            + gather(y0, x1) * ((1 - wy) * wx)
            + gather(y1, x0) * (wy * (1 - wx))
            + gather(y1, x1) * (wy * wx)
        )
        patches.append(sampled.permute(1, 0, 2, 3))
    out = torch.cat(patches, dim=1)
    return out[0] if single else out


def _batched(patch: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if patch.dim() == 3:
        return patch.unsqueeze(0), True
    return patch, False


def _hidden(params: ParameterVector, patches: torch.Tensor) -> torch.Tensor:
    flat = patches.flatten(1)
    return torch.tanh(flat @ params["head.fc.weight"].T + params["head.fc.bias"])


def classify_logits(params: ParameterVector, patch: torch.Tensor) -> torch.Tensor:
    """Return the pre-normalization class scores."""
    patches, single = _batched(patch)
    hidden = _hidden(params, patches)
    logits = hidden @ params["head.cls.weight"].T + params["head.cls.bias"]
    return logits[0] if single else logits


def classify(params: ParameterVector, patch: torch.Tensor) -> torch.Tensor:
    """Return the class distribution over background, cytoplasm and nucleus."""
    return torch.softmax(classify_logits(params, patch), dim=-1)


def revise_box(params: ParameterVector, patch: torch.Tensor) -> torch.Tensor:
    """Return the (dx, dy, dw, dh) revision of the proposal box."""
    patches, single = _batched(patch)
    hidden = _hidden(params, patches)
    deltas = hidden @ params["head.box.weight"].T + params["head.box.bias"]
    return deltas[0] if single else deltas


def mask_logits(
    params: ParameterVector, patch: torch.Tensor, mask_size: int = 14
) -> torch.Tensor:
    """Return m×m mask logits over the proposal box."""
    patches, single = _batched(patch)
    weight, bias = params["head.mask.weight"], params["head.mask.bias"]
    logits = F.conv2d(patches, weight, bias, padding=1)[:, 0]
    factor = mask_size // patches.shape[-1]
    logits = logits.repeat_interleave(factor, dim=1).repeat_interleave(factor, dim=2)
    return logits[0] if single else logits


def segment(
    params: ParameterVector, patch: torch.Tensor, mask_size: int = 14
) -> torch.Tensor:
    """Return m×m mask probabilities over the proposal box."""
    return torch.sigmoid(mask_logits(params, patch, mask_size))


def adapt(params: ParameterVector, pyramid: FeaturePyramid) -> FeaturePyramid:
    """Apply the per-stage 1×1 adaptation layers halving the channel count."""
    stages = []
    for index, stage in enumerate(pyramid.stages):
        if stage.shape[0] % 2:
            msg = f"stage {index} has an odd channel count {stage.shape[0]}"
            raise GeometryError(msg)
        weight = params[f"adapt.{index}.weight"]
        bias = params[f"adapt.{index}.bias"]
        stages.append(torch.einsum("oc,chw->ohw", weight, stage) + bias[:, None, None])
    return FeaturePyramid(stages, pyramid.strides)


@dataclass
class SupervisedTargets:
    """IoU-matched training targets for one annotated scene."""

    proposals: FloatArray
    labels: npt.NDArray[np.int64]
    box_targets: FloatArray
    mask_targets: FloatArray
    anchor_labels: npt.NDArray[np.int64]

    @property
    def foreground(self) -> npt.NDArray[np.bool_]:
        """Return the proposals matched to a ground truth."""
        return self.labels > 0


def build_targets(
    proposals: ProposalBatch, scene: Scene, config: SegmenterConfig
) -> SupervisedTargets:
    """Match proposals (plus the ground-truth boxes) and anchors to instances.

    A proposal is foreground at max IoU ≥ fg_iou, background below bg_iou and
    ignored (label -1) in between.
    """
    if scene.instances is None:
        msg = "supervised targets need an annotated scene"
        raise MissingAnnotationsError(msg)
    gt_boxes = np.array(
        [inst.bbox for inst in scene.instances], dtype=np.float64
    ).reshape(-1, 4)
    boxes = np.concatenate([proposals.boxes, gt_boxes])
    count = boxes.shape[0]
    labels = np.zeros(count, dtype=np.int64)
    box_targets = np.zeros((count, 4))
    mask_targets = np.zeros((count, config.mask_size, config.mask_size))
    grid = anchors(config)
    anchor_labels = np.zeros(grid.shape[0], dtype=np.int64)
    if gt_boxes.shape[0]:
        overlaps = box_iou(boxes, gt_boxes)
        best = overlaps.max(axis=1)
        match = overlaps.argmax(axis=1)
        labels[(best >= config.bg_iou) & (best < config.fg_iou)] = -1
        for index in np.flatnonzero(best >= config.fg_iou):
            instance = scene.instances[match[index]]
            labels[index] = int(instance.class_id)
            mask_targets[index] = resample_mask(
                instance.mask, boxes[index], config.mask_size
            )
        fg = labels > 0
        box_targets[fg] = encode_boxes(boxes[fg], gt_boxes[match[fg]])

        anchor_overlaps = box_iou(grid, gt_boxes)
        anchor_best = anchor_overlaps.max(axis=1)
        ambiguous = (anchor_best >= config.bg_iou) & (anchor_best < config.fg_iou)
        anchor_labels[ambiguous] = -1
        anchor_labels[anchor_best >= config.fg_iou] = 1
        for column in range(gt_boxes.shape[0]):
            if anchor_overlaps[:, column].max() > 0:
                anchor_labels[int(anchor_overlaps[:, column].argmax())] = 1
    return SupervisedTargets(boxes, labels, box_targets, mask_targets, anchor_labels)


def classification_loss(
    logits: torch.Tensor, labels: npt.NDArray[np.int64]
) -> torch.Tensor:
    """Mean cross-entropy over proposals that are not ignored."""
    valid = torch.as_tensor(labels >= 0)
    if not bool(valid.any()):
        return logits.sum() * 0.0
    return F.cross_entropy(logits[valid], torch.as_tensor(labels)[valid])


def box_regression_loss(deltas: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 over the four offsets, averaged over foreground proposals."""
    if deltas.shape[0] == 0:
        return deltas.sum() * 0.0
    loss = F.smooth_l1_loss(deltas, targets, beta=SMOOTH_L1_BETA, reduction="sum")
    return loss / deltas.shape[0]


def mask_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-pixel binary cross-entropy over foreground proposal masks."""
    if logits.shape[0] == 0:
        return logits.sum() * 0.0
    return F.binary_cross_entropy_with_logits(logits, targets)


def objectness_loss(
    logits: torch.Tensor, labels: npt.NDArray[np.int64]
) -> torch.Tensor:
    """Binary cross-entropy averaged separately over positive and negative anchors."""
    terms = []
    for value in (1, 0):
        selected = torch.as_tensor(labels == value)
        if bool(selected.any()):
            target = torch.full((int(selected.sum()),), float(value), dtype=DTYPE)
            terms.append(F.binary_cross_entropy_with_logits(logits[selected], target))
    if not terms:
        return logits.sum() * 0.0
    return torch.stack(terms).mean()


def supervised_terms(
    params: ParameterVector,
    pyramid: FeaturePyramid,
    targets: SupervisedTargets,
    config: SegmenterConfig,
) -> dict[str, torch.Tensor]:
    """Return the cls, reg, seg and rpn losses for fixed proposals."""
    patches = roi_extract(pyramid, targets.proposals, config.roi_size)
    fg = torch.as_tensor(targets.foreground)
    fg_patches = patches[fg]
    return {
        "cls": classification_loss(classify_logits(params, patches), targets.labels),
        "reg": box_regression_loss(
            revise_box(params, fg_patches),
            torch.as_tensor(targets.box_targets[targets.foreground], dtype=DTYPE),
        ),
        "seg": mask_loss(
            mask_logits(params, fg_patches, config.mask_size),
            torch.as_tensor(targets.mask_targets[targets.foreground], dtype=DTYPE),
        ),
        "rpn": objectness_loss(objectness(params, pyramid), targets.anchor_labels),
    }


@dataclass
class SupervisedLoss:
    """The weighted supervised loss and its per-head breakdown."""

    total: torch.Tensor
    terms: dict[str, torch.Tensor] = field(default_factory=dict)

    def breakdown(self) -> dict[str, float]:
        """Return the per-head values as plain floats."""
        return {name: float(value.detach()) for name, value in self.terms.items()}


def supervised_loss(
    params: ParameterVector, scene: Scene, config: SegmenterConfig
) -> SupervisedLoss:
    """Return L_cls + L_reg + L_seg (+ weighted L_rpn) on an annotated scene."""
    if scene.instances is None:
        msg = "supervised loss needs an annotated scene"
        raise MissingAnnotationsError(msg)
    pyramid = extract_features(params, scene.image, config)
    proposals = propose(params, pyramid, config, ProposalSource.STUDENT_RPN)
    targets = build_targets(proposals, scene, config)
    terms = supervised_terms(params, pyramid, targets, config)
    total = (
        terms["cls"] + terms["reg"] + terms["seg"] + config.rpn_weight * terms["rpn"]
    )
    return SupervisedLoss(total, terms)


def predict_instances(
    params: ParameterVector, image: Any, config: SegmenterConfig
) -> InstanceSet:
    """Turn proposals into scored, suppressed instance masks."""
    with torch.no_grad():
        pyramid = extract_features(params, image, config)
        proposals = propose(params, pyramid, config)
        patches = roi_extract(pyramid, proposals.boxes, config.roi_size)
        probs = classify(params, patches).numpy()
        deltas = revise_box(params, patches).numpy()
        masks = segment(params, patches, config.mask_size).numpy()
    labels = probs.argmax(axis=1)
    scores = probs[np.arange(len(labels)), labels]
    boxes = decode_boxes(proposals.boxes, deltas, tuple(config.image_size))

    kept_masks, kept_classes, kept_scores = [], [], []
    for class_id in np.unique(labels[labels > 0]):
        candidates = np.flatnonzero(
            (labels == class_id) & (scores >= config.score_threshold)
        )
        if candidates.size == 0:
            continue
        order = greedy_nms(boxes[candidates], scores[candidates], config.detection_iou)
        for index in candidates[order]:
            mask = paste_mask(masks[index], boxes[index], tuple(config.image_size))
            if mask.any():
                kept_masks.append(mask)
                kept_classes.append(int(class_id))
                kept_scores.append(float(scores[index]))
    ranking = np.argsort(-np.asarray(kept_scores), kind="stable")
    ranking = ranking[: config.max_detections]
    _LOGGER.debug("kept %d of %d proposals", ranking.size, len(proposals))
    return InstanceSet.build(
        [kept_masks[i] for i in ranking],
        [kept_classes[i] for i in ranking],
        [kept_scores[i] for i in ranking],
        tuple(config.image_size),
    )


@dataclass
class Checkpoint:
    """Everything needed to resume a run bitwise."""

    t: int
    student: ParameterVector
    teacher: ParameterVector | None
    optimizer_state: dict[str, Any]
    rng: dict[str, int]


def save_checkpoint(checkpoint: Checkpoint, path: Path) -> None:
    """Write a versioned checkpoint file."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "t": checkpoint.t,
        "layout": {
            name: [segment.offset, list(segment.shape)]
            for name, segment in checkpoint.student.layout.items()
        },
        "student": checkpoint.student.values.detach().clone(),
        "teacher": None
        if checkpoint.teacher is None
        else checkpoint.teacher.values.detach().clone(),
        "optimizer": checkpoint.optimizer_state,
        "rng": dict(checkpoint.rng),
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as exc:
        msg = f"cannot write checkpoint {path}"
        raise CheckpointError(msg) from exc


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    try:
        payload = torch.load(path, weights_only=True)
    except (OSError, RuntimeError) as exc:
        msg = f"cannot read checkpoint {path}"
        raise CheckpointError(msg) from exc
    if payload.get("version") != CHECKPOINT_VERSION:
        msg = f"unsupported checkpoint version {payload.get('version')}"
        raise CheckpointError(msg)
    layout = {
        name: Segment(int(offset), tuple(int(v) for v in shape))
        for name, (offset, shape) in payload["layout"].items()
    }
    teacher = payload["teacher"]
    return Checkpoint(
        t=int(payload["t"]),
        student=ParameterVector(payload["student"], layout),
        teacher=None if teacher is None else ParameterVector(teacher, dict(layout)),
        optimizer_state=payload["optimizer"],
        rng={key: int(value) for key, value in payload["rng"].items()},
    )
