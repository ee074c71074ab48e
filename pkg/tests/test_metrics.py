"""Tests for the segmentation metrics."""

from __future__ import annotations

import itertools
from collections.abc import Sequence

import numpy as np
import pytest

from mmtpsm.const import DEFAULT_IOU_THRESHOLDS
from mmtpsm.metrics import InstanceSet, aji, evaluate, mean_ap
from mmtpsm.synth import generate_scene

from .helper import box_mask, instance_set, small_spec

GT = instance_set([box_mask((8, 8), 0, 0, 2, 2)])


def random_boxes(seed: int, count: int) -> InstanceSet:
    """Return up to count disjoint boxes on a 16x16 grid, one per 4x4 tile."""
    rng = np.random.default_rng(seed)
    tiles = rng.permutation(16)[:count]
    masks = []
    for tile in tiles:
        x0, y0 = 4 * (tile % 4), 4 * (tile // 4)
        width, height = rng.integers(1, 5, size=2)
        masks.append(box_mask((16, 16), x0, y0, x0 + width, y0 + height))
    scores = rng.uniform(0.1, 1.0, size=len(masks))
    return instance_set(masks, scores=scores, shape=(16, 16))


def random_overlapping(rng: np.random.Generator, count: int) -> InstanceSet:
    """Return count random, possibly overlapping boxes on an 8x8 grid."""
    masks = []
    for _ in range(count):
        x0, y0 = rng.integers(0, 7, size=2)
        x1, y1 = rng.integers(x0 + 1, 9), rng.integers(y0 + 1, 9)
        masks.append(box_mask((8, 8), x0, y0, x1, y1))
    scores = rng.permutation(np.linspace(0.1, 0.9, 9))[:count]
    return instance_set(masks, scores=scores)


def separated_boxes(rng: np.random.Generator, count: int) -> InstanceSet:
    """Return count boxes on a 16x16 grid, one per 4x4 tile, never touching."""
    masks = []
    for tile in rng.permutation(16)[:count]:
        left, top = 4 * (tile % 4), 4 * (tile // 4)
        x0, y0 = left + rng.integers(0, 2), top + rng.integers(0, 2)
        x1, y1 = rng.integers(x0 + 1, left + 4), rng.integers(y0 + 1, top + 4)
        masks.append(box_mask((16, 16), x0, y0, x1, y1))
    return instance_set(masks, shape=(16, 16))


def jittered_boxes(
    rng: np.random.Generator, gt: InstanceSet, count: int
) -> InstanceSet:
    """Return count predictions, mostly ground-truth boxes with moved corners."""
    masks = []
    for _ in range(count):
        if rng.random() < 0.7:
            ys, xs = np.nonzero(gt.masks[rng.integers(len(gt))])
            corners = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1])
            x0, y0, x1, y1 = np.clip(
                corners + rng.integers(-1, 2, size=4), [0, 0, 1, 1], [15, 15, 16, 16]
            )
        else:
            x0, y0 = rng.integers(0, 15, size=2)
            x1, y1 = x0 + rng.integers(1, 5), y0 + rng.integers(1, 5)
        masks.append(box_mask((16, 16), x0, y0, max(x1, x0 + 1), max(y1, y0 + 1)))
    scores = rng.permutation(np.linspace(0.1, 0.9, 9))[:count]
    return instance_set(masks, scores=scores, shape=(16, 16))


def pixels(instances: InstanceSet) -> list[set[tuple[int, int]]]:
    """Return the pixel coordinates of every instance."""
    return [set(zip(*np.nonzero(mask), strict=True)) for mask in instances.masks]


def interpolated_precision(hits: Sequence[bool], gt_count: int) -> float:
    """Return the 101-point interpolated precision of a ranked hit list."""
    curve = []
    for rank in range(1, len(hits) + 1):
        found = sum(hits[:rank])
        curve.append((found / gt_count, found / rank))
    total = 0.0
    for level in np.linspace(0.0, 1.0, 101):
        total += max((p for r, p in curve if r >= level), default=0.0)
    return total / 101


def reference_aji(pred: InstanceSet, gt: InstanceSet) -> float:
    """Greedy AJI over pixel sets."""
    pred_px = pixels(pred)
    used: set[int] = set()
    intersection = union = 0
    for truth in pixels(gt):
        best, best_iou = None, 0.0
        for index, candidate in enumerate(pred_px):
            iou = len(truth & candidate) / len(truth | candidate)
            if index not in used and iou > best_iou:
                best, best_iou = index, iou
        if best is None:
            union += len(truth)
            continue
        used.add(best)
        intersection += len(truth & pred_px[best])
        union += len(truth | pred_px[best])
    union += sum(len(p) for index, p in enumerate(pred_px) if index not in used)
    return intersection / union


def reference_ap(pred: InstanceSet, gt: InstanceSet) -> float:
    """Mean over thresholds of greedy score-ordered matching."""
    pred_px, gt_px = pixels(pred), pixels(gt)
    order = sorted(range(len(pred)), key=lambda index: -pred.scores[index])
    values = []
    for threshold in DEFAULT_IOU_THRESHOLDS:
        taken: set[int] = set()
        hits: list[bool] = []
        for index in order:
            best, best_iou = None, -1.0
            for column, truth in enumerate(gt_px):
                iou = len(truth & pred_px[index]) / len(truth | pred_px[index])
                if column not in taken and iou > best_iou:
                    best, best_iou = column, iou
            hit = best is not None and best_iou >= threshold
            if best is not None and hit:
                taken.add(best)
            hits.append(hit)
        values.append(interpolated_precision(hits, len(gt)))
    return float(np.mean(values))


def exhaustive_ap(pred: InstanceSet, gt: InstanceSet) -> float:
    """Mean over thresholds of the best matching found by enumeration.

    Every one-to-one assignment of ranked predictions to ground truths is
    tried, and the one whose hit list is lexicographically largest in score
    order wins.
    """
    pred_px, gt_px = pixels(pred), pixels(gt)
    order = sorted(range(len(pred)), key=lambda index: -pred.scores[index])
    iou = [
        [len(truth & pred_px[index]) / len(truth | pred_px[index]) for truth in gt_px]
        for index in order
    ]
    values = []
    for threshold in DEFAULT_IOU_THRESHOLDS:
        options = [
            [-1, *(column for column, value in enumerate(row) if value >= threshold)]
            for row in iou
        ]
        best: tuple[bool, ...] = (False,) * len(order)
        for choice in itertools.product(*options):
            matched = [column for column in choice if column >= 0]
            if len(set(matched)) == len(matched):
                best = max(best, tuple(column >= 0 for column in choice))
        values.append(interpolated_precision(best, len(gt)))
    return float(np.mean(values))


@pytest.mark.parametrize("seed", range(500))
def test_reference_agreement(seed: int) -> None:
    """Test both metrics against loop-based references on small random cases."""
    rng = np.random.default_rng(seed)
    gt = random_overlapping(rng, int(rng.integers(1, 5)))
    pred = random_overlapping(rng, int(rng.integers(0, 5)))
    assert aji(pred, gt) == pytest.approx(reference_aji(pred, gt), abs=1e-12)
    assert mean_ap(pred, gt) == pytest.approx(reference_ap(pred, gt), abs=1e-12)


@pytest.mark.parametrize("seed", range(500))
def test_exhaustive_matching(seed: int) -> None:
    """Test mAP equals the best one-to-one matching on separated ground truths."""
    rng = np.random.default_rng(seed)
    gt = separated_boxes(rng, int(rng.integers(1, 5)))
    pred = jittered_boxes(rng, gt, int(rng.integers(0, 5)))
    assert mean_ap(pred, gt) == pytest.approx(exhaustive_ap(pred, gt), abs=1e-12)


@pytest.mark.parametrize(
    ("pred", "result"),
    [
        (GT, 1.0),
        (instance_set([box_mask((8, 8), 0, 0, 2, 1)]), 0.5),
        (instance_set([box_mask((8, 8), 4, 4, 6, 6)]), 0.0),
        (instance_set([]), 0.0),
    ],
    ids=["Identical", "Half covered", "Disjoint", "No predictions"],
)
def test_aji(pred: InstanceSet, result: float) -> None:
    """Test hand-evaluated AJI values."""
    assert aji(pred, GT) == pytest.approx(result)


def test_aji_empty_ground_truth() -> None:
    """Test AJI without ground truth."""
    assert aji(instance_set([]), instance_set([])) == 1.0
    assert aji(GT, instance_set([])) == 0.0


def test_aji_size_mismatch() -> None:
    """Test sets of different image size are rejected."""
    with pytest.raises(ValueError):
        aji(instance_set([], shape=(4, 4)), GT)


def test_aji_stray_prediction() -> None:
    """Test an unmatched prediction only grows the union."""
    pred = instance_set([box_mask((8, 8), 0, 0, 2, 2), box_mask((8, 8), 5, 5, 8, 8)])
    assert aji(pred, GT) == pytest.approx(4 / 13)


def test_aji_greedy_order() -> None:
    """Test ground truths pick their best unused prediction in index order."""
    gt = instance_set([box_mask((8, 8), 0, 0, 4, 2), box_mask((8, 8), 0, 0, 2, 2)])
    pred = instance_set([box_mask((8, 8), 0, 0, 2, 2), box_mask((8, 8), 0, 0, 4, 2)])
    assert aji(pred, gt) == 1.0


@pytest.mark.parametrize("seed", range(100))
def test_self_agreement(seed: int) -> None:
    """Test any instance set agrees perfectly with itself."""
    instances = random_boxes(seed, 6)
    assert aji(instances, instances) == 1.0
    assert mean_ap(instances, instances) == 1.0


@pytest.mark.parametrize("seed", range(10))
def test_spurious_prediction(seed: int) -> None:
    """Test adding a prediction that touches no ground truth never raises AJI."""
    gt = random_boxes(seed, 4)
    pred = random_boxes(seed + 100, 4)
    stray = ~gt.masks.any(axis=0)
    extra = InstanceSet(
        np.concatenate([pred.masks, stray[None]]),
        np.append(pred.class_ids, 1),
        np.append(pred.scores, 0.5),
    )
    assert 0.0 <= aji(pred, gt) <= 1.0
    assert aji(extra, gt) <= aji(pred, gt)


def test_mean_ap_perfect() -> None:
    """Test a single exact prediction."""
    assert mean_ap(instance_set([GT.masks[0]], scores=[0.9]), GT) == 1.0


def test_mean_ap_partial_overlap() -> None:
    """Test a prediction with mask IoU 0.6 passes three of ten thresholds."""
    gt = instance_set([box_mask((4, 8), 0, 0, 5, 1)], shape=(4, 8))
    pred = instance_set([box_mask((4, 8), 0, 0, 3, 1)], shape=(4, 8))
    assert mean_ap(pred, gt) == pytest.approx(0.3)


def test_mean_ap_ranking() -> None:
    """Test a false positive ranked first halves the precision."""
    pred = instance_set(
        [box_mask((8, 8), 4, 4, 6, 6), GT.masks[0]], scores=[0.9, 0.8]
    )
    assert mean_ap(pred, GT) == pytest.approx(0.5)


def test_mean_ap_no_ground_truth() -> None:
    """Test mAP is absent without ground truth."""
    assert mean_ap(GT, instance_set([])) is None
    assert mean_ap(instance_set([]), GT) == 0.0


def test_instance_set_validation() -> None:
    """Test inconsistent arrays are rejected."""
    with pytest.raises(ValueError):
        InstanceSet(np.zeros((2, 4, 4), dtype=bool), np.array([1]), np.array([1.0]))
    with pytest.raises(ValueError):
        instance_set([box_mask((8, 8), 0, 0, 1, 1)], scores=[1.5])


def test_evaluate_oracle() -> None:
    """Test the ground truth scores perfectly on every field."""
    generator = small_spec().dataset.generator
    gt_sets = [
        InstanceSet.from_scene(generate_scene(seed, generator)) for seed in range(3)
    ]
    report = evaluate(gt_sets, gt_sets)
    assert report.model_dump() == {
        "aji_cyto": 1.0,
        "aji_nuc": 1.0,
        "aji_avg": 1.0,
        "map_cyto": 1.0,
        "map_nuc": 1.0,
        "map_avg": 1.0,
    }


def test_evaluate_no_predictions() -> None:
    """Test empty predictions score zero."""
    generator = small_spec().dataset.generator
    gt_sets = [
        InstanceSet.from_scene(generate_scene(seed, generator)) for seed in range(2)
    ]
    empty = [instance_set([], shape=(48, 48)) for _ in gt_sets]
    report = evaluate(empty, gt_sets)
    assert report.aji_cyto == 0.0
    assert report.aji_nuc == 0.0
    assert report.aji_avg == 0.0
    assert report.map_avg == 0.0


def test_evaluate_pooled() -> None:
    """Test AJI sums intersections and unions over images."""
    gt_sets = [GT, instance_set([box_mask((8, 8), 0, 0, 4, 4)])]
    pred_sets = [GT, instance_set([box_mask((8, 8), 0, 0, 4, 1)])]
    report = evaluate(pred_sets, gt_sets)
    assert report.aji_cyto == pytest.approx((4 + 4) / (4 + 16))
    assert report.aji_nuc == 1.0
    assert report.map_nuc is None
    assert report.map_avg == report.map_cyto


def test_evaluate_length_mismatch() -> None:
    """Test prediction and ground truth lists must pair up."""
    with pytest.raises(ValueError):
        evaluate([GT], [])
