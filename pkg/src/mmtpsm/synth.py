"""Synthetic overlapping cell scenes and their on-disk datasets."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path

import numpy as np
from pydantic import ValidationError
from skimage.draw import ellipse

from mmtpsm.const import SCENE_MAGIC, CellClass
from mmtpsm.helper import (
    BoolArray,
    FloatArray,
    decode_rle,
    derive_seed,
    encode_rle,
    rng_for,
    tight_bbox,
)
from mmtpsm.models import DatasetManifest, GeneratorConfig
from mmtpsm.types import DatasetReadError, DatasetWriteError

__all__ = [
    "Instance",
    "Scene",
    "build_dataset",
    "generate_scene",
    "load_manifest",
    "load_scene",
    "read_scene",
    "render_background",
    "write_scene",
]

_LOGGER = getLogger(__name__)

_HEADER = struct.Struct("<4sIII")
IMAGE_FILE = "image.bin"
INSTANCES_FILE = "instances.json"
MANIFEST_FILE = "manifest.json"
SCENES_DIR = "scenes"

_CYTOPLASM_COLOR = ((0.45, 0.75), (0.35, 0.6), (0.55, 0.85))
_NUCLEUS_COLOR = ((0.1, 0.3), (0.05, 0.25), (0.3, 0.5))


@dataclass
class Instance:
    """One annotated cell component."""

    mask: BoolArray
    class_id: CellClass
    parent: int | None = None
    bbox: tuple[int, int, int, int] = field(init=False)

    def __post_init__(self) -> None:
        """Derive the tight box from the mask."""
        self.bbox = tight_bbox(self.mask)


@dataclass
class Scene:
    """An image with its instances; unlabeled scenes have no instances."""

    image: FloatArray
    instances: list[Instance] | None
    seed: int

    @property
    def annotated(self) -> bool:
        """Return if the scene carries ground truth."""
        return self.instances is not None

    def instances_of(self, class_id: CellClass) -> list[Instance]:
        """Return the instances of a single class."""
        return [inst for inst in self.instances or [] if inst.class_id == class_id]


def _background(seed: int, config: GeneratorConfig) -> FloatArray:
    height, width = config.image_size
    rng = rng_for(seed, 0)
    base = rng.uniform(0.75, 0.9, size=3)
    angle = rng.uniform(-np.pi, np.pi)
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    ramp = (np.cos(angle) * cols / width + np.sin(angle) * rows / height) / 2
    return base[None, None, :] + config.gradient_strength * ramp[..., None]


def _noise(seed: int, config: GeneratorConfig) -> FloatArray:
    height, width = config.image_size
    return rng_for(seed, 2).normal(0.0, config.noise_std, size=(height, width, 3))


def render_background(seed: int, config: GeneratorConfig) -> FloatArray:
    """Return the cell-free image of a scene: background gradient plus noise."""
    return np.clip(_background(seed, config) + _noise(seed, config), 0.0, 1.0)


def _ellipse_mask(
    center: tuple[int, int],
    radii: tuple[float, float],
    rotation: float,
    shape: tuple[int, int],
) -> BoolArray:
    mask = np.zeros(shape, dtype=bool)
    rr, cc = ellipse(
        center[0], center[1], radii[0], radii[1], shape=shape, rotation=rotation
    )
    mask[rr, cc] = True
    mask[center] = True
    return mask


def _composite(
    canvas: FloatArray, mask: BoolArray, color: FloatArray, opacity: float
) -> None:
    canvas[mask] = canvas[mask] * (1.0 - opacity) + color * opacity


def generate_scene(seed: int, config: GeneratorConfig) -> Scene:
    """Generate a scene of translucent overlapping cells.

    Every cytoplasm is a filled ellipse with one smaller, nearly opaque nucleus
    ellipse inside it. The result depends on (seed, config) only.
    """
    height, width = config.image_size
    shape = (height, width)
    rng = rng_for(seed, 1)
    canvas = _background(seed, config)
    background_color = canvas.mean(axis=(0, 1))
    instances: list[Instance] = []
    centers: list[tuple[int, int, float]] = []

    count = int(rng.integers(config.cell_count[0], config.cell_count[1] + 1))
    for _ in range(count):
        radii = (
            float(rng.uniform(*config.cytoplasm_axes)),
            float(rng.uniform(*config.cytoplasm_axes)),
        )
        if centers and rng.random() < config.overlap_probability:
            anchor_row, anchor_col, reach = centers[int(rng.integers(len(centers)))]
            row = anchor_row + rng.uniform(-reach, reach)
            col = anchor_col + rng.uniform(-reach, reach)
        else:
            row = rng.uniform(0, height)
            col = rng.uniform(0, width)
        center = (
            int(np.clip(round(row), 0, height - 1)),
            int(np.clip(round(col), 0, width - 1)),
        )
        rotation = float(rng.uniform(-np.pi, np.pi))
        cytoplasm = _ellipse_mask(center, radii, rotation, shape)

        nucleus_radii = (
            float(rng.uniform(*config.nucleus_axes)),
            float(rng.uniform(*config.nucleus_axes)),
        )
        slack = max(0.0, 0.3 * (min(radii) - max(nucleus_radii)))
        nucleus_center = (
            int(np.clip(round(center[0] + rng.uniform(-slack, slack)), 0, height - 1)),
            int(np.clip(round(center[1] + rng.uniform(-slack, slack)), 0, width - 1)),
        )
        nucleus = _ellipse_mask(nucleus_center, nucleus_radii, rotation, shape)
        nucleus &= cytoplasm
        if not nucleus.any():
            nucleus = _ellipse_mask(center, nucleus_radii, rotation, shape) & cytoplasm

        fade = rng.uniform(0.0, config.contrast_reduction)
        cyto_color = np.array([rng.uniform(*bounds) for bounds in _CYTOPLASM_COLOR])
        cyto_color = cyto_color * (1.0 - fade) + background_color * fade
        nuc_color = np.array([rng.uniform(*bounds) for bounds in _NUCLEUS_COLOR])
        nuc_color = nuc_color * (1.0 - fade) + background_color * fade
        opacity = rng.uniform(*config.cytoplasm_opacity)
        _composite(canvas, cytoplasm, cyto_color, opacity)
        _composite(canvas, nucleus, nuc_color, rng.uniform(*config.nucleus_opacity))

        parent = len(instances)
        instances.append(Instance(cytoplasm, CellClass.CYTOPLASM))
        instances.append(Instance(nucleus, CellClass.NUCLEUS, parent=parent))
        centers.append((center[0], center[1], max(radii)))

    image = np.clip(canvas + _noise(seed, config), 0.0, 1.0)
    return Scene(image=image, instances=instances, seed=seed)


def write_scene(scene: Scene, directory: Path, annotated: bool = True) -> None:
    """Write a scene as a binary image plus, if annotated, a JSON sidecar.

    The image file is a little-endian header (magic, H, W, C as uint32)
    followed by H·W·C little-endian float64 values in row-major order.
    """
    directory.mkdir(parents=True, exist_ok=True)
    height, width, channels = scene.image.shape
    payload = _HEADER.pack(SCENE_MAGIC, height, width, channels)
    payload += np.ascontiguousarray(scene.image, dtype="<f8").tobytes()
    (directory / IMAGE_FILE).write_bytes(payload)
    if annotated and scene.instances is not None:
        sidecar = {
            "seed": scene.seed,
            "instances": [
                {
                    "class_id": int(inst.class_id),
                    "bbox": list(inst.bbox),
                    "parent": inst.parent,
                    "mask": encode_rle(inst.mask),
                }
                for inst in scene.instances
            ],
        }
        (directory / INSTANCES_FILE).write_text(
            json.dumps(sidecar, sort_keys=True), encoding="utf-8"
        )


def read_scene(directory: Path, seed: int) -> Scene:
    """Read a scene written by :func:`write_scene`."""
    try:
        payload = (directory / IMAGE_FILE).read_bytes()
        magic, height, width, channels = _HEADER.unpack_from(payload)
        if magic != SCENE_MAGIC:
            msg = f"{directory} is not a scene image"
            raise DatasetReadError(msg)
        image = np.frombuffer(
            payload, dtype="<f8", count=height * width * channels, offset=_HEADER.size
        ).reshape(height, width, channels).astype(np.float64)
        instances: list[Instance] | None = None
        sidecar_path = directory / INSTANCES_FILE
        if sidecar_path.exists():
            sidecar = json.loads(sidecar_path.read_text(encoding="utf-8"))
            instances = [
                Instance(
                    decode_rle(entry["mask"]),
                    CellClass(entry["class_id"]),
                    parent=entry["parent"],
                )
                for entry in sidecar["instances"]
            ]
    except (OSError, ValueError, KeyError, struct.error) as exc:
        msg = f"cannot read scene at {directory}"
        raise DatasetReadError(msg) from exc
    return Scene(image=image, instances=instances, seed=seed)


def build_dataset(
    config: GeneratorConfig,
    n_labeled: int,
    n_unlabeled: int,
    root_seed: int,
    out_dir: Path,
    n_validation: int = 0,
) -> DatasetManifest:
    """Generate and write labeled, unlabeled and validation scenes.

    The manifest is written last and atomically, so a failed build never
    leaves one behind.
    """
    if n_labeled < 1 or n_unlabeled < 0 or n_validation < 0:
        msg = "need at least one labeled scene and non-negative split sizes"
        raise ValueError(msg)
    manifest_path = out_dir / MANIFEST_FILE
    total = n_labeled + n_unlabeled + n_validation
    ids = [f"scene-{index:05d}" for index in range(total)]
    seeds = {
        scene_id: derive_seed(root_seed, index) for index, scene_id in enumerate(ids)
    }
    if len(set(seeds.values())) != total:
        msg = f"root seed {root_seed} produced colliding scene seeds"
        raise DatasetWriteError(msg)
    labeled_ids = ids[:n_labeled]
    unlabeled_ids = ids[n_labeled : n_labeled + n_unlabeled]
    validation_ids = ids[n_labeled + n_unlabeled :]
    unlabeled_set = set(unlabeled_ids)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest_path.unlink(missing_ok=True)
        for scene_id in ids:
            scene = generate_scene(seeds[scene_id], config)
            write_scene(
                scene,
                out_dir / SCENES_DIR / scene_id,
                annotated=scene_id not in unlabeled_set,
            )
        manifest = DatasetManifest(
            labeled_ids=labeled_ids,
            unlabeled_ids=unlabeled_ids,
            validation_ids=validation_ids,
            seeds=seeds,
            image_size=config.image_size,
            generator_config=config,
        )
        staging = manifest_path.with_suffix(".tmp")
        staging.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
        os.replace(staging, manifest_path)
    except OSError as exc:
        msg = f"cannot write dataset to {out_dir}"
        raise DatasetWriteError(msg) from exc
    _LOGGER.info("wrote %d scenes and manifest to %s", total, out_dir)
    return manifest


def load_manifest(path: Path) -> DatasetManifest:
    """Load a manifest file, or the manifest inside a dataset directory."""
    if path.is_dir():
        path = path / MANIFEST_FILE
    try:
        return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except (OSError, ValidationError) as exc:
        msg = f"cannot read manifest {path}"
        raise DatasetReadError(msg) from exc


def load_scene(root: Path, manifest: DatasetManifest, scene_id: str) -> Scene:
    """Load one scene of a dataset by id."""
    if scene_id not in manifest.seeds:
        msg = f"unknown scene id {scene_id}"
        raise DatasetReadError(msg)
    return read_scene(root / SCENES_DIR / scene_id, manifest.seeds[scene_id])
