"""Tests for the synthetic scene generator."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from mmtpsm.const import CellClass
from mmtpsm.helper import tight_bbox
from mmtpsm.models import GeneratorConfig
from mmtpsm.synth import (
    IMAGE_FILE,
    INSTANCES_FILE,
    MANIFEST_FILE,
    SCENES_DIR,
    build_dataset,
    generate_scene,
    load_manifest,
    load_scene,
    read_scene,
    render_background,
    write_scene,
)
from mmtpsm.types import DatasetReadError, MaskShapeError

from .const import SMALL_IMAGE

SMALL = GeneratorConfig(
    image_size=SMALL_IMAGE,
    cell_count=(1, 3),
    cytoplasm_axes=(6.0, 9.0),
    nucleus_axes=(2.0, 3.0),
)


def test_deterministic() -> None:
    """Test a scene depends on its seed only."""
    first = generate_scene(7, SMALL)
    second = generate_scene(7, SMALL)
    assert np.array_equal(first.image, second.image)
    assert len(first.instances or []) == len(second.instances or [])
    for left, right in zip(first.instances or [], second.instances or []):
        assert np.array_equal(left.mask, right.mask)
        assert left.class_id == right.class_id
    assert not np.array_equal(first.image, generate_scene(8, SMALL).image)


def test_no_cells() -> None:
    """Test a scene without cells is its background."""
    config = SMALL.model_copy(update={"cell_count": (0, 0)})
    scene = generate_scene(11, config)
    assert scene.instances == []
    assert np.array_equal(scene.image, render_background(11, config))


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_scene_structure(seed: int) -> None:
    """Test every nucleus lies inside its cytoplasm and boxes are tight."""
    scene = generate_scene(seed, SMALL)
    assert scene.image.shape == (*SMALL_IMAGE, 3)
    assert scene.image.min() >= 0.0
    assert scene.image.max() <= 1.0
    instances = scene.instances or []
    assert 2 <= len(instances) <= 6
    for index, inst in enumerate(instances):
        assert inst.mask.any()
        assert inst.bbox == tight_bbox(inst.mask)
        if inst.class_id == CellClass.NUCLEUS:
            assert inst.parent == index - 1
            parent = instances[inst.parent]
            assert parent.class_id == CellClass.CYTOPLASM
            assert not (inst.mask & ~parent.mask).any()
        else:
            assert inst.parent is None


def test_write_read(tmp_path: Path) -> None:
    """Test a written scene reads back unchanged."""
    scene = generate_scene(5, SMALL)
    write_scene(scene, tmp_path)
    loaded = read_scene(tmp_path, 5)
    assert np.array_equal(loaded.image, scene.image)
    assert loaded.instances is not None
    assert [inst.bbox for inst in loaded.instances] == [
        inst.bbox for inst in scene.instances or []
    ]
    assert [inst.parent for inst in loaded.instances] == [
        inst.parent for inst in scene.instances or []
    ]


def test_write_unlabeled(tmp_path: Path) -> None:
    """Test unlabeled scenes have no sidecar."""
    write_scene(generate_scene(5, SMALL), tmp_path, annotated=False)
    assert not (tmp_path / INSTANCES_FILE).exists()
    assert read_scene(tmp_path, 5).instances is None


def test_bad_magic(tmp_path: Path) -> None:
    """Test reading a file that is not a scene image."""
    write_scene(generate_scene(5, SMALL), tmp_path)
    payload = bytearray((tmp_path / IMAGE_FILE).read_bytes())
    payload[:4] = b"XXXX"
    (tmp_path / IMAGE_FILE).write_bytes(bytes(payload))
    with pytest.raises(DatasetReadError):
        read_scene(tmp_path, 5)


def test_missing_scene(tmp_path: Path) -> None:
    """Test reading a directory without an image."""
    with pytest.raises(DatasetReadError):
        read_scene(tmp_path, 0)


def test_truncated_sidecar_mask(tmp_path: Path) -> None:
    """Test a sidecar mask whose counts do not fill the image."""
    write_scene(generate_scene(5, SMALL), tmp_path)
    sidecar = json.loads((tmp_path / INSTANCES_FILE).read_text(encoding="utf-8"))
    height, width = sidecar["instances"][0]["mask"]["size"]
    sidecar["instances"][0]["mask"]["size"] = [height + 1, width]
    (tmp_path / INSTANCES_FILE).write_text(json.dumps(sidecar), encoding="utf-8")
    with pytest.raises(MaskShapeError):
        read_scene(tmp_path, 5)


def test_build_dataset(tmp_path: Path) -> None:
    """Test split sizes and sidecars of a built dataset."""
    manifest = build_dataset(SMALL, 3, 2, 9, tmp_path, n_validation=1)
    assert len(manifest.labeled_ids) == 3
    assert len(manifest.unlabeled_ids) == 2
    assert len(manifest.validation_ids) == 1
    assert len(set(manifest.seeds.values())) == 6
    for scene_id in manifest.unlabeled_ids:
        assert not (tmp_path / SCENES_DIR / scene_id / INSTANCES_FILE).exists()
    for scene_id in manifest.labeled_ids + manifest.validation_ids:
        assert (tmp_path / SCENES_DIR / scene_id / INSTANCES_FILE).exists()
    assert load_manifest(tmp_path) == manifest
    scene = load_scene(tmp_path, manifest, manifest.labeled_ids[0])
    assert scene.annotated


def test_build_dataset_reproducible(tmp_path: Path) -> None:
    """Test the same root seed gives identical datasets."""
    build_dataset(SMALL, 2, 1, 4, tmp_path / "a")
    build_dataset(SMALL, 2, 1, 4, tmp_path / "b")
    build_dataset(SMALL, 2, 1, 5, tmp_path / "c")
    first = (tmp_path / "a" / MANIFEST_FILE).read_bytes()
    assert first == (tmp_path / "b" / MANIFEST_FILE).read_bytes()
    assert first != (tmp_path / "c" / MANIFEST_FILE).read_bytes()
    for scene_dir in (tmp_path / "a" / SCENES_DIR).iterdir():
        twin = tmp_path / "b" / SCENES_DIR / scene_dir.name
        assert (scene_dir / IMAGE_FILE).read_bytes() == (twin / IMAGE_FILE).read_bytes()


def test_unknown_scene(tmp_path: Path) -> None:
    """Test loading a scene id missing from the manifest."""
    manifest = build_dataset(SMALL, 1, 0, 0, tmp_path)
    with pytest.raises(DatasetReadError):
        load_scene(tmp_path, manifest, "scene-99999")


@pytest.mark.parametrize(
    "update",
    [
        {"image_size": (16, 16)},
        {"cell_count": (3, 1)},
        {"nucleus_axes": (2.0, 12.0)},
        {"overlap_probability": 1.5},
    ],
    ids=["Too small", "Unordered count", "Nucleus too large", "Probability"],
)
def test_invalid_config(update: dict[str, object]) -> None:
    """Test invalid generator settings are rejected."""
    with pytest.raises(ValidationError):
        GeneratorConfig(**{**SMALL.model_dump(), **update})
