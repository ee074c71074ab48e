"""Stochastic augmentor with fully recorded transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from skimage.color import hsv2rgb, rgb2hsv

from mmtpsm.helper import BoolArray, FloatArray, derive_seed, rng_for
from mmtpsm.models import AugmentConfig, TransformRecord
from mmtpsm.types import GeometryError

__all__ = [
    "ViewSet",
    "apply",
    "make_views",
    "map_boxes",
    "map_mask",
    "sample_transform",
]

_ERASE_ATTEMPTS = 10


@dataclass
class ViewSet:
    """Teacher and student views of one scene."""

    teacher_views: list[tuple[FloatArray, TransformRecord]]
    student_views: list[tuple[FloatArray, TransformRecord]]
    source_id: str


def _sample_erase_box(
    rng: np.random.Generator,
    config: AugmentConfig,
    image_size: tuple[int, int],
) -> tuple[int, int, int, int] | None:
    height, width = image_size
    total = height * width
    log_aspect = (math.log(config.erase_aspect[0]), math.log(config.erase_aspect[1]))
    for _ in range(_ERASE_ATTEMPTS):
        area = rng.uniform(*config.erase_area) * total
        aspect = math.exp(rng.uniform(*log_aspect))
        box_h = round(math.sqrt(area * aspect))
        box_w = round(math.sqrt(area / aspect))
        if not (0 < box_h <= height and 0 < box_w <= width):
            continue
        if not config.erase_area[0] <= box_h * box_w / total <= config.erase_area[1]:
            continue
        y0 = int(rng.integers(0, height - box_h + 1))
        x0 = int(rng.integers(0, width - box_w + 1))
        return (x0, y0, x0 + box_w, y0 + box_h)
    return None


def sample_transform(
    seed: int,
    config: AugmentConfig | None = None,
    image_size: tuple[int, int] = (96, 96),
) -> TransformRecord:
    """Draw one augmentation record, deterministic in seed."""
    config = config or AugmentConfig()
    rng = rng_for(seed)
    brightness = float(rng.uniform(*config.brightness))
    contrast = float(rng.uniform(*config.contrast))
    hue = float(rng.uniform(*config.hue))
    erase_box = None
    if rng.random() < config.erase_probability:
        erase_box = _sample_erase_box(rng, config, image_size)
    erase_seed = int(rng.integers(0, 2**63 - 1))
    flipped = bool(rng.random() < config.flip_probability)
    return TransformRecord(
        brightness_delta=brightness,
        contrast_factor=contrast,
        hue_shift=hue,
        erase_box=erase_box,
        erase_seed=erase_seed,
        flipped=flipped,
    )


def _shift_hue(image: FloatArray, degrees: float) -> FloatArray:
    hsv = rgb2hsv(image)
    hsv[..., 0] = np.mod(hsv[..., 0] + degrees / 360.0, 1.0)
    shifted = hsv2rgb(hsv)
    gray = image.max(axis=-1) == image.min(axis=-1)
    shifted[gray] = image[gray]
    return shifted


def apply(image: FloatArray, record: TransformRecord) -> FloatArray:
    """Apply color changes, then erasing, then the flip; clamp to [0, 1]."""
    out = np.array(image, dtype=np.float64, copy=True)
    if record.brightness_delta != 0.0:
        out = out + record.brightness_delta
    if record.contrast_factor != 1.0:
        out = (out - 0.5) * record.contrast_factor + 0.5
    out = np.clip(out, 0.0, 1.0)
    if record.hue_shift != 0.0:
        out = _shift_hue(out, record.hue_shift)
    if record.erase_box is not None:
        x0, y0, x1, y1 = record.erase_box
        noise = rng_for(record.erase_seed).uniform(0.0, 1.0, size=(y1 - y0, x1 - x0, 3))
        out[y0:y1, x0:x1] = noise
    if record.flipped:
        out = out[:, ::-1]
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


def map_boxes(
    record: TransformRecord,
    boxes: FloatArray,
    image_size: tuple[int, int],
) -> FloatArray:
    """Map boxes from original-image to augmented-image coordinates.

    image_size is (height, width). Only the flip moves geometry, so mapping
    is its own inverse.
    """
    height, width = image_size
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if (
        (boxes[:, :2] < 0).any()
        or (boxes[:, 2] > width).any()
        or (boxes[:, 3] > height).any()
        or (boxes[:, 0] > boxes[:, 2]).any()
        or (boxes[:, 1] > boxes[:, 3]).any()
    ):
        msg = f"boxes lie outside the {height}x{width} image"
        raise GeometryError(msg)
    if not record.flipped:
        return boxes.copy()
    return np.stack(
        [
            width - boxes[:, 2],
            boxes[:, 1],
            width - boxes[:, 0],
            boxes[:, 3],
        ],
        axis=1,
    )


def map_mask(record: TransformRecord, mask: BoolArray) -> BoolArray:
    """Map a mask between original and augmented coordinates."""
    if not record.flipped:
        return mask.copy()
    return np.ascontiguousarray(mask[:, ::-1])


def make_views(
    image: FloatArray,
    seed: int,
    config: AugmentConfig | None = None,
    source_id: str = "",
) -> ViewSet:
    """Produce the K teacher views and L student views of one image."""
    config = config or AugmentConfig()
    image_size = (image.shape[0], image.shape[1])

    def view(stream: int, index: int) -> tuple[FloatArray, TransformRecord]:
        record = sample_transform(derive_seed(seed, stream, index), config, image_size)
        return apply(image, record), record

    return ViewSet(
        teacher_views=[view(0, k) for k in range(config.teacher_views)],
        student_views=[view(1, index) for index in range(config.student_views)],
        source_id=source_id,
    )
