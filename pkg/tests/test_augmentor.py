"""Tests for the augmentor."""

from __future__ import annotations

import numpy as np
import pytest

from mmtpsm.augmentor import apply, make_views, map_boxes, map_mask, sample_transform
from mmtpsm.models import AugmentConfig, TransformRecord
from mmtpsm.types import GeometryError

from .helper import box_mask

IMAGE = np.random.default_rng(0).uniform(0.0, 1.0, size=(24, 32, 3))


def test_identity_config() -> None:
    """Test a degenerate config only produces identity records."""
    for seed in range(20):
        record = sample_transform(seed, AugmentConfig.identity(), (24, 32))
        assert record.is_identity
        assert np.array_equal(apply(IMAGE, record), IMAGE)


def test_deterministic() -> None:
    """Test a record depends on its seed only."""
    assert sample_transform(3) == sample_transform(3)
    assert sample_transform(3) != sample_transform(4)


def test_flip_rate() -> None:
    """Test the flip is drawn with its configured probability."""
    flips = sum(sample_transform(seed).flipped for seed in range(10_000))
    assert 0.47 <= flips / 10_000 <= 0.53


def test_brightness() -> None:
    """Test a brightness shift on a constant image."""
    image = np.full((4, 4, 3), 0.5)
    result = apply(image, TransformRecord(brightness_delta=0.2))
    assert result == pytest.approx(np.full((4, 4, 3), 0.7))


def test_clamped() -> None:
    """Test results stay within [0, 1]."""
    record = TransformRecord(brightness_delta=0.6, contrast_factor=2.0, hue_shift=10.0)
    result = apply(IMAGE, record)
    assert result.min() >= 0.0
    assert result.max() <= 1.0


def test_flip_involution() -> None:
    """Test mapping twice returns the original geometry."""
    record = TransformRecord(flipped=True)
    mask = box_mask((24, 32), 1, 2, 9, 7)
    assert np.array_equal(map_mask(record, map_mask(record, mask)), mask)
    boxes = np.array([[1.0, 2.0, 9.0, 7.0]])
    twice = map_boxes(record, map_boxes(record, boxes, (24, 32)), (24, 32))
    assert np.array_equal(twice, boxes)


def test_map_boxes() -> None:
    """Test a flipped box mirrors around the image center."""
    box = np.array([[0, 0, 10, 10]])
    mapped = map_boxes(TransformRecord(flipped=True), box, (96, 96))
    assert mapped.tolist() == [[86, 0, 96, 10]]
    unflipped = map_boxes(TransformRecord(), box, (96, 96))
    assert unflipped.tolist() == [[0, 0, 10, 10]]
    tall = np.array([[4, 30, 10, 40]])
    wide = map_boxes(TransformRecord(flipped=True), tall, (40, 64))
    assert wide.tolist() == [[54, 30, 60, 40]]


@pytest.mark.parametrize(
    ("box", "flipped"),
    [
        ([-1, 0, 10, 10], True),
        ([0, -1, 10, 10], True),
        ([0, 0, 97, 10], True),
        ([0, 0, 10, 41], True),
        ([0, 0, 10, 41], False),
        ([10, 0, 5, 10], True),
        ([0, 10, 5, 5], False),
    ],
    ids=[
        "Negative x",
        "Negative y",
        "Too wide",
        "Too tall",
        "Too tall unflipped",
        "Inverted x",
        "Inverted y",
    ],
)
def test_map_boxes_outside(box: list[int], flipped: bool) -> None:
    """Test boxes outside a 40x96 image are rejected on either axis."""
    with pytest.raises(GeometryError):
        map_boxes(TransformRecord(flipped=flipped), np.array([box]), (40, 96))


@pytest.mark.parametrize("seed", range(10))
def test_flip_commutes(seed: int) -> None:
    """Test the flip only mirrors the color-changed image."""
    record = sample_transform(seed, image_size=(24, 32))
    unflipped = apply(IMAGE, record.model_copy(update={"flipped": False}))
    flipped = apply(IMAGE, record.model_copy(update={"flipped": True}))
    assert np.array_equal(flipped, unflipped[:, ::-1])


def test_erase_area() -> None:
    """Test erased boxes cover the configured share of the image."""
    config = AugmentConfig(erase_probability=1.0)
    areas = []
    for seed in range(200):
        record = sample_transform(seed, config, (96, 96))
        if record.erase_box is not None:
            x0, y0, x1, y1 = record.erase_box
            assert 0 <= x0 < x1 <= 96
            assert 0 <= y0 < y1 <= 96
            areas.append((x1 - x0) * (y1 - y0) / 96**2)
    assert len(areas) > 150
    assert min(areas) >= 0.02
    assert max(areas) <= 0.2


def test_make_views() -> None:
    """Test views are reproducible and independent of each other."""
    config = AugmentConfig(teacher_views=3, student_views=2)
    views = make_views(IMAGE, 12, config, "scene-00000")
    assert len(views.teacher_views) == 3
    assert len(views.student_views) == 2
    assert views.source_id == "scene-00000"
    records = [record for _, record in views.teacher_views + views.student_views]
    assert len(set(records)) == 5
    again = make_views(IMAGE, 12, config, "scene-00000")
    for (left, _), (right, _) in zip(views.teacher_views, again.teacher_views):
        assert np.array_equal(left, right)
