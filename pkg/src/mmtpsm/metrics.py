"""Aggregated Jaccard Index and mask mean average precision."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
import numpy.typing as npt

from mmtpsm.const import (
    DEFAULT_IOU_THRESHOLDS,
    FOREGROUND_CLASSES,
    RECALL_POINTS,
    CellClass,
)
from mmtpsm.helper import BoolArray, FloatArray, mask_iou
from mmtpsm.models import MetricReport

if TYPE_CHECKING:
    from mmtpsm.synth import Scene

__all__ = ["InstanceSet", "aji", "evaluate", "mean_ap"]

RECALL_THRESHOLDS = np.linspace(0.0, 1.0, RECALL_POINTS)


@dataclass
class InstanceSet:
    """Instances of one image; ground truth carries score 1."""

    masks: BoolArray
    class_ids: npt.NDArray[np.int64]
    scores: FloatArray

    def __post_init__(self) -> None:
        """Validate the stacked arrays."""
        count = self.masks.shape[0]
        if (
            self.masks.ndim != 3
            or self.class_ids.shape != (count,)
            or self.scores.shape != (count,)
        ):
            msg = "masks, class ids and scores disagree in length"
            raise ValueError(msg)
        if ((self.scores < 0) | (self.scores > 1)).any():
            msg = "scores must lie in [0, 1]"
            raise ValueError(msg)

    def __len__(self) -> int:
        """Return the number of instances."""
        return int(self.masks.shape[0])

    @property
    def image_size(self) -> tuple[int, int]:
        """Return the (H, W) shared by all masks."""
        return int(self.masks.shape[1]), int(self.masks.shape[2])

    @classmethod
    def build(
        cls,
        masks: Sequence[BoolArray],
        class_ids: Sequence[int],
        scores: Sequence[float],
        image_size: tuple[int, int],
    ) -> InstanceSet:
        """Stack per-instance lists; an empty list gives an empty set."""
        stacked = (
            np.stack([np.asarray(m, dtype=bool) for m in masks])
            if masks
            else np.zeros((0, *image_size), dtype=bool)
        )
        return cls(
            stacked,
            np.asarray(class_ids, dtype=np.int64).reshape(-1),
            np.asarray(scores, dtype=np.float64).reshape(-1),
        )

    @classmethod
    def from_scene(cls, scene: Scene) -> InstanceSet:
        """Return the ground truth of an annotated scene."""
        instances = scene.instances or []
        return cls.build(
            [inst.mask for inst in instances],
            [int(inst.class_id) for inst in instances],
            [1.0] * len(instances),
            (scene.image.shape[0], scene.image.shape[1]),
        )

    def of_class(self, class_id: int) -> InstanceSet:
        """Return the instances of one class."""
        selected = self.class_ids == int(class_id)
        return InstanceSet(
            self.masks[selected], self.class_ids[selected], self.scores[selected]
        )


def _flatten(masks: BoolArray) -> BoolArray:
    return masks.reshape(masks.shape[0], masks.shape[1] * masks.shape[2])


def _aji_counts(pred: InstanceSet, gt: InstanceSet) -> tuple[int, int]:
    """Return the aggregated intersection and union of one image."""
    pred_flat = _flatten(pred.masks)
    gt_flat = _flatten(gt.masks)
    pred_area = pred_flat.sum(axis=1)
    gt_area = gt_flat.sum(axis=1)
    used = np.zeros(len(pred), dtype=bool)
    intersection = union = 0
    overlaps = mask_iou(gt.masks, pred.masks)
    inter = gt_flat.astype(np.int64) @ pred_flat.astype(np.int64).T
    for index in range(len(gt)):
        best = -1
        if len(pred):
            candidates = np.where(used, -1.0, overlaps[index])
            best = int(np.argmax(candidates))
            if candidates[best] <= 0:
                best = -1
        if best < 0:
            union += int(gt_area[index])
            continue
        used[best] = True
        intersection += int(inter[index, best])
        union += int(gt_area[index] + pred_area[best] - inter[index, best])
    union += int(pred_area[~used].sum())
    return intersection, union


def aji(pred: InstanceSet, gt: InstanceSet) -> float:
    """Return the Aggregated Jaccard Index of one image and one class.

    Ground truths are matched in index order, each to its best-IoU unused
    prediction with positive overlap. Unmatched areas only grow the union.
    """
    if pred.image_size != gt.image_size:
        msg = f"image sizes {pred.image_size} and {gt.image_size} differ"
        raise ValueError(msg)
    if len(gt) == 0:
        return 1.0 if len(pred) == 0 else 0.0
    intersection, union = _aji_counts(pred, gt)
    return intersection / union if union else 1.0


def _match(
    pred: InstanceSet, gt: InstanceSet, thresholds: Sequence[float]
) -> tuple[FloatArray, BoolArray]:
    """Return sorted scores and per-threshold true positive flags of one image."""
    order = np.argsort(-pred.scores, kind="stable")
    matched = np.zeros((len(thresholds), len(pred)), dtype=bool)
    if len(pred) and len(gt):
        overlaps = mask_iou(pred.masks[order], gt.masks)
        for row, threshold in enumerate(thresholds):
            taken = np.zeros(len(gt), dtype=bool)
            for index in range(len(pred)):
                candidates = np.where(taken, -1.0, overlaps[index])
                best = int(np.argmax(candidates))
                if candidates[best] >= threshold:
                    taken[best] = True
                    matched[row, index] = True
    return pred.scores[order], matched


def _pooled_ap(
    pairs: Sequence[tuple[InstanceSet, InstanceSet]], thresholds: Sequence[float]
) -> float | None:
    """Return mAP with predictions ranked across all images."""
    total_gt = sum(len(gt) for _, gt in pairs)
    if total_gt == 0:
        return None
    scores, flags = [], []
    for pred, gt in pairs:
        image_scores, image_flags = _match(pred, gt, thresholds)
        scores.append(image_scores)
        flags.append(image_flags)
    all_scores = np.concatenate(scores)
    all_flags = np.concatenate(flags, axis=1)[:, np.argsort(-all_scores, kind="stable")]

    precisions = []
    for row in all_flags:
        if row.size == 0:
            precisions.append(0.0)
            continue
        tp = np.cumsum(row)
        recall = tp / total_gt
        precision = tp / np.arange(1, row.size + 1)
        precision = np.maximum.accumulate(precision[::-1])[::-1]
        positions = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
        sampled = np.where(
            positions < row.size, precision[np.minimum(positions, row.size - 1)], 0.0
        )
        precisions.append(float(sampled.mean()))
    return float(np.mean(precisions))


def mean_ap(
    pred: InstanceSet,
    gt: InstanceSet,
    iou_thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
) -> float | None:
    """Return mask mAP of one image and one class; None without ground truth.

    Per threshold, predictions are visited by descending score and matched to
    the best unmatched ground truth with mask IoU at or above the threshold.
    AP is the mean of the interpolated precision at 101 recall points.
    """
    if pred.image_size != gt.image_size:
        msg = f"image sizes {pred.image_size} and {gt.image_size} differ"
        raise ValueError(msg)
    return _pooled_ap([(pred, gt)], iou_thresholds)


def evaluate(
    pred_sets: Sequence[InstanceSet],
    gt_sets: Sequence[InstanceSet],
    iou_thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
) -> MetricReport:
    """Return per-class and averaged AJI and mAP over a whole set of images.

    AJI sums intersections and unions over all images; mAP ranks every
    prediction of the set together.
    """
    if len(pred_sets) != len(gt_sets):
        msg = f"got {len(pred_sets)} predictions for {len(gt_sets)} ground truths"
        raise ValueError(msg)
    values: dict[CellClass, tuple[float, float | None]] = {}
    for class_id in FOREGROUND_CLASSES:
        pairs = [
            (pred.of_class(class_id), gt.of_class(class_id))
            for pred, gt in zip(pred_sets, gt_sets, strict=True)
        ]
        intersection = union = 0
        for pred, gt in pairs:
            if pred.image_size != gt.image_size:
                msg = "prediction and ground truth image sizes differ"
                raise ValueError(msg)
            image_inter, image_union = _aji_counts(pred, gt)
            intersection += image_inter
            union += image_union
        class_aji = intersection / union if union else 1.0
        values[class_id] = (class_aji, _pooled_ap(pairs, iou_thresholds))
    return MetricReport.from_classes(
        aji_cyto=values[CellClass.CYTOPLASM][0],
        aji_nuc=values[CellClass.NUCLEUS][0],
        map_cyto=values[CellClass.CYTOPLASM][1],
        map_nuc=values[CellClass.NUCLEUS][1],
    )
