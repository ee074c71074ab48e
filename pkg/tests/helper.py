"""Test helpers."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from mmtpsm.cli import load_spec
from mmtpsm.helper import BoolArray
from mmtpsm.metrics import InstanceSet
from mmtpsm.models import ExperimentSpec

from . import fixture_path
from .const import EXPERIMENT_FIXTURE


def small_spec() -> ExperimentSpec:
    """Return the scaled-down experiment used across tests."""
    return load_spec(fixture_path(EXPERIMENT_FIXTURE))


def box_mask(
    shape: tuple[int, int], x0: int, y0: int, x1: int, y1: int
) -> BoolArray:
    """Return a mask with the pixels of one box set."""
    mask = np.zeros(shape, dtype=bool)
    mask[y0:y1, x0:x1] = True
    return mask


def instance_set(
    masks: Sequence[BoolArray],
    class_ids: Sequence[int] | None = None,
    scores: Sequence[float] | None = None,
    shape: tuple[int, int] = (8, 8),
) -> InstanceSet:
    """Return an instance set, class 1 and score 1 unless given."""
    return InstanceSet.build(
        list(masks),
        [1] * len(masks) if class_ids is None else list(class_ids),
        [1.0] * len(masks) if scores is None else list(scores),
        shape,
    )
