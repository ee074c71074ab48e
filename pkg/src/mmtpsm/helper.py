"""Helper functions for geometry, masks and seeding."""

from __future__ import annotations

import math
from typing import Any

import numpy as np
import numpy.typing as npt
from pycocotools import mask as mask_utils

from mmtpsm.types import GeometryError, MaskShapeError

__all__ = [
    "box_iou",
    "clip_boxes",
    "decode_boxes",
    "decode_rle",
    "derive_seed",
    "encode_boxes",
    "encode_rle",
    "greedy_nms",
    "mask_iou",
    "paste_mask",
    "resample_mask",
    "rng_for",
    "tight_bbox",
]

FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]

_MAX_LOG_SCALE = math.log(1000.0 / 16.0)


def rng_for(*keys: int) -> np.random.Generator:
    """Return a generator for the stream identified by the given integer keys.

    Streams with different keys are statistically independent, no global
    state is touched.
    """
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def derive_seed(*keys: int) -> int:
    """Return a 64-bit seed derived from the given integer keys."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(
        1, dtype=np.uint64
    )
    return int(state[0])


def tight_bbox(mask: BoolArray) -> tuple[int, int, int, int]:
    """Return the tight box (x0, y0, x1, y1) of a mask, x1 and y1 exclusive."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        msg = "cannot compute the bounding box of an empty mask"
        raise GeometryError(msg)
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def box_iou(boxes_a: FloatArray, boxes_b: FloatArray) -> FloatArray:
    """Return the pairwise IoU matrix of two box arrays of shape (N, 4)."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    xx0 = np.maximum(boxes_a[:, None, 0], boxes_b[None, :, 0])
    yy0 = np.maximum(boxes_a[:, None, 1], boxes_b[None, :, 1])
    xx1 = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2])
    yy1 = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3])
    inter = np.maximum(0.0, xx1 - xx0) * np.maximum(0.0, yy1 - yy0)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def mask_iou(masks_a: BoolArray, masks_b: BoolArray) -> FloatArray:
    """Return the pairwise IoU matrix of two mask stacks of shape (N, H, W)."""
    flat_a = masks_a.reshape(masks_a.shape[0], math.prod(masks_a.shape[1:]))
    flat_b = masks_b.reshape(masks_b.shape[0], math.prod(masks_b.shape[1:]))
    flat_a, flat_b = flat_a.astype(np.int64), flat_b.astype(np.int64)
    inter = flat_a @ flat_b.T
    union = flat_a.sum(axis=1)[:, None] + flat_b.sum(axis=1)[None, :] - inter
    return np.divide(
        inter.astype(np.float64),
        union.astype(np.float64),
        out=np.zeros(inter.shape, dtype=np.float64),
        where=union > 0,
    )


def greedy_nms(
    boxes: FloatArray,
    scores: FloatArray,
    iou_threshold: float,
    limit: int | None = None,
) -> list[int]:
    """Greedy overlap suppression.

    Boxes are visited by descending score, equal scores by ascending index. A
    box is dropped when its IoU with an already kept box exceeds the threshold.
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep: list[int] = []
    while order.size > 0:
        best = int(order[0])
        keep.append(best)
        if limit is not None and len(keep) >= limit:
            break
        overlaps = box_iou(boxes[best : best + 1], boxes[order[1:]])[0]
        order = order[1:][overlaps <= iou_threshold]
    return keep


def clip_boxes(boxes: FloatArray, image_size: tuple[int, int]) -> FloatArray:
    """Clip boxes to the image, keeping at least one pixel of extent."""
    height, width = image_size
    clipped = np.asarray(boxes, dtype=np.float64).copy().reshape(-1, 4)
    clipped[:, 0] = np.clip(clipped[:, 0], 0.0, width - 1.0)
    clipped[:, 1] = np.clip(clipped[:, 1], 0.0, height - 1.0)
    clipped[:, 2] = np.clip(clipped[:, 2], clipped[:, 0] + 1.0, float(width))
    clipped[:, 3] = np.clip(clipped[:, 3], clipped[:, 1] + 1.0, float(height))
    return clipped


def encode_boxes(proposals: FloatArray, targets: FloatArray) -> FloatArray:
    """Return the (dx, dy, dw, dh) revision turning proposals into targets."""
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    return np.stack(
        [
            (targets[:, 0] + 0.5 * tw - proposals[:, 0] - 0.5 * pw) / pw,
            (targets[:, 1] + 0.5 * th - proposals[:, 1] - 0.5 * ph) / ph,
            np.log(tw / pw),
            np.log(th / ph),
        ],
        axis=1,
    )


def decode_boxes(
    proposals: FloatArray,
    deltas: FloatArray,
    image_size: tuple[int, int],
) -> FloatArray:
    """Apply box revisions to proposals and clip the result to the image."""
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    cx = proposals[:, 0] + 0.5 * pw + deltas[:, 0] * pw
    cy = proposals[:, 1] + 0.5 * ph + deltas[:, 1] * ph
    w = pw * np.exp(np.minimum(deltas[:, 2], _MAX_LOG_SCALE))
    h = ph * np.exp(np.minimum(deltas[:, 3], _MAX_LOG_SCALE))
    boxes = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], 1)
    return clip_boxes(boxes, image_size)


def _covered_range(low: float, high: float, limit: int) -> tuple[int, int]:
    """Return the pixel index range whose centers fall in [low, high)."""
    start = max(0, math.ceil(low - 0.5))
    stop = min(limit, math.ceil(high - 0.5))
    return start, stop


def paste_mask(
    probs: FloatArray,
    box: FloatArray,
    image_size: tuple[int, int],
    threshold: float = 0.5,
) -> BoolArray:
    """Paste a thresholded m×m mask grid into its box at image resolution.

    A pixel is covered by the box when its center lies inside it; it takes the
    value of the grid cell its center falls into.
    """
    height, width = image_size
    grid = np.asarray(probs) >= threshold
    size = grid.shape[0]
    out = np.zeros((height, width), dtype=bool)
    x0, y0, x1, y1 = (float(v) for v in box)
    col_start, col_stop = _covered_range(x0, x1, width)
    row_start, row_stop = _covered_range(y0, y1, height)
    if col_stop <= col_start or row_stop <= row_start:
        return out
    cols = np.arange(col_start, col_stop) + 0.5
    rows = np.arange(row_start, row_stop) + 0.5
    gx = np.clip(np.floor((cols - x0) / (x1 - x0) * size).astype(int), 0, size - 1)
    gy = np.clip(np.floor((rows - y0) / (y1 - y0) * size).astype(int), 0, size - 1)
    out[row_start:row_stop, col_start:col_stop] = grid[np.ix_(gy, gx)]
    return out


def resample_mask(mask: BoolArray, box: FloatArray, size: int) -> FloatArray:
    """Sample a full-image mask on a size×size grid of bin centers over box."""
    height, width = mask.shape
    x0, y0, x1, y1 = (float(v) for v in box)
    centers = (np.arange(size) + 0.5) / size
    cols = np.clip(np.floor(x0 + centers * (x1 - x0)).astype(int), 0, width - 1)
    rows = np.clip(np.floor(y0 + centers * (y1 - y0)).astype(int), 0, height - 1)
    return mask[np.ix_(rows, cols)].astype(np.float64)


def encode_rle(mask: BoolArray) -> dict[str, Any]:
    """Encode a mask as a COCO compressed run-length dict.

    The counts string is stored as text so the dict is JSON serializable.
    """
    rle = mask_utils.encode(np.asfortranarray(np.asarray(mask, dtype=np.uint8)))
    return {"size": [int(v) for v in rle["size"]], "counts": rle["counts"].decode()}


def decode_rle(rle: dict[str, Any]) -> BoolArray:
    """Decode a mask produced by :func:`encode_rle`.

    Raises MaskShapeError when the counts do not describe a mask of the
    declared size.
    """
    height, width = (int(v) for v in rle["size"])
    counts = rle["counts"]
    text = counts.decode() if isinstance(counts, bytes) else str(counts)
    decoded = mask_utils.decode({"size": [height, width], "counts": text.encode()})
    mask = np.ascontiguousarray(decoded, dtype=bool)
    if mask.shape != (height, width) or encode_rle(mask)["counts"] != text:
        msg = f"run-length counts do not describe a {height}x{width} mask"
        raise MaskShapeError(msg)
    return mask
