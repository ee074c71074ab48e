"""Models for configs, records and reports."""

from __future__ import annotations

from typing import ClassVar

from pydantic import BaseModel, ConfigDict, Field, model_validator

from mmtpsm.const import (
    DEFAULT_IOU_THRESHOLDS,
    SCHEMA_VERSION,
    Ablation,
    SharpenConvention,
    TrainMode,
)

__all__ = [
    "AugmentConfig",
    "AuditEntry",
    "AuditReport",
    "DatasetConfig",
    "DatasetManifest",
    "ExperimentSpec",
    "GeneratorConfig",
    "MetricReport",
    "SegmenterConfig",
    "SweepAggregate",
    "SweepCell",
    "SweepReport",
    "TelemetryRecord",
    "TrainConfig",
    "TransformRecord",
]


def _check_range(name: str, value: tuple[float, float]) -> None:
    if value[0] > value[1]:
        msg = f"{name} range {value} is not ordered"
        raise ValueError(msg)


class _Config(BaseModel):
    """Base for immutable, strict configuration models."""

    model_config = ConfigDict(frozen=True, extra="forbid")


class GeneratorConfig(_Config):
    """Model representing the synthetic cell scene generator settings."""

    image_size: tuple[int, int] = Field((96, 96))
    cell_count: tuple[int, int] = Field((2, 5))
    cytoplasm_axes: tuple[float, float] = Field((10.0, 18.0))
    nucleus_axes: tuple[float, float] = Field((3.0, 5.0))
    cytoplasm_opacity: tuple[float, float] = Field((0.25, 0.5))
    nucleus_opacity: tuple[float, float] = Field((0.75, 0.95))
    overlap_probability: float = Field(0.5, ge=0.0, le=1.0)
    contrast_reduction: float = Field(0.3, ge=0.0, lt=1.0)
    noise_std: float = Field(0.02, ge=0.0)
    gradient_strength: float = Field(0.15, ge=0.0, le=0.5)

    @model_validator(mode="after")
    def _validate(self) -> GeneratorConfig:
        if min(self.image_size) < 32:
            msg = f"image size {self.image_size} is smaller than 32x32"
            raise ValueError(msg)
        if self.cell_count[0] < 0:
            msg = "cell count cannot be negative"
            raise ValueError(msg)
        for name in (
            "cell_count",
            "cytoplasm_axes",
            "nucleus_axes",
            "cytoplasm_opacity",
            "nucleus_opacity",
        ):
            _check_range(name, getattr(self, name))
        if self.nucleus_axes[0] <= 0:
            msg = "nucleus axes must be positive"
            raise ValueError(msg)
        if self.nucleus_axes[1] > self.cytoplasm_axes[0]:
            msg = (
                f"nucleus axes {self.nucleus_axes} can exceed cytoplasm axes "
                f"{self.cytoplasm_axes}, containment is impossible"
            )
            raise ValueError(msg)
        return self


class DatasetConfig(_Config):
    """Model representing the dataset split sizes."""

    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    n_labeled: int = Field(20, ge=1)
    n_unlabeled: int = Field(200, ge=0)
    n_validation: int = Field(10, ge=0)
    root_seed: int = Field(0, ge=0)


class DatasetManifest(BaseModel):
    """Model representing a dataset written to disk."""

    schema_version: int = Field(SCHEMA_VERSION)
    labeled_ids: list[str] = Field(...)
    unlabeled_ids: list[str] = Field([])
    validation_ids: list[str] = Field([])
    seeds: dict[str, int] = Field(...)
    image_size: tuple[int, int] = Field(...)
    generator_config: GeneratorConfig = Field(...)

    @model_validator(mode="after")
    def _validate(self) -> DatasetManifest:
        labeled = set(self.labeled_ids)
        unlabeled = set(self.unlabeled_ids)
        validation = set(self.validation_ids)
        if labeled & unlabeled or labeled & validation or unlabeled & validation:
            msg = "dataset splits overlap"
            raise ValueError(msg)
        missing = (labeled | unlabeled | validation) - set(self.seeds)
        if missing:
            msg = f"scenes without a stored seed: {sorted(missing)}"
            raise ValueError(msg)
        return self


class AugmentConfig(_Config):
    """Model representing the stochastic augmentor settings."""

    brightness: tuple[float, float] = Field((-0.15, 0.15))
    contrast: tuple[float, float] = Field((0.8, 1.25))
    hue: tuple[float, float] = Field((-18.0, 18.0))
    erase_probability: float = Field(0.5, ge=0.0, le=1.0)
    erase_area: tuple[float, float] = Field((0.02, 0.2))
    erase_aspect: tuple[float, float] = Field((0.3, 3.3))
    flip_probability: float = Field(0.5, ge=0.0, le=1.0)
    teacher_views: int = Field(4, ge=2)
    student_views: int = Field(2, ge=1)

    @model_validator(mode="after")
    def _validate(self) -> AugmentConfig:
        for name in ("brightness", "contrast", "hue", "erase_area", "erase_aspect"):
            _check_range(name, getattr(self, name))
        if self.contrast[0] <= 0:
            msg = "contrast factors must be positive"
            raise ValueError(msg)
        if not 0.02 <= self.erase_area[0] <= self.erase_area[1] <= 0.2:
            msg = "erase area must lie within [0.02, 0.2] of the image"
            raise ValueError(msg)
        return self

    @classmethod
    def identity(cls) -> AugmentConfig:
        """Return a degenerate config whose samples are all identity records."""
        return cls(
            brightness=(0.0, 0.0),
            contrast=(1.0, 1.0),
            hue=(0.0, 0.0),
            erase_probability=0.0,
            flip_probability=0.0,
        )


class TransformRecord(BaseModel):
    """Model representing the exact parameters of one augmentation."""

    model_config = ConfigDict(frozen=True)

    brightness_delta: float = Field(0.0)
    contrast_factor: float = Field(1.0, gt=0.0)
    hue_shift: float = Field(0.0)
    erase_box: tuple[int, int, int, int] | None = Field(None)
    erase_seed: int = Field(0, ge=0)
    flipped: bool = Field(False)

    @property
    def is_identity(self) -> bool:
        """Return if applying the record leaves every image unchanged."""
        return (
            self.brightness_delta == 0.0
            and self.contrast_factor == 1.0
            and self.hue_shift == 0.0
            and self.erase_box is None
            and not self.flipped
        )


class SegmenterConfig(_Config):
    """Model representing the two-stage segmenter architecture."""

    image_size: tuple[int, int] = Field((96, 96))
    channels: tuple[int, ...] = Field((8, 16))
    strides: tuple[int, ...] = Field((4, 8))
    anchor_sizes: tuple[int, ...] = Field((16, 32))
    num_proposals: int = Field(64, ge=1)
    pre_nms_top_n: int = Field(256, ge=1)
    proposal_iou: float = Field(0.7, gt=0.0, le=1.0)
    roi_size: int = Field(7, ge=1)
    mask_size: int = Field(14, ge=1)
    hidden: int = Field(32, ge=1)
    fg_iou: float = Field(0.5)
    bg_iou: float = Field(0.3)
    rpn_weight: float = Field(1.0, ge=0.0)
    init_scale: float = Field(1.0, gt=0.0)
    score_threshold: float = Field(0.5, ge=0.0, le=1.0)
    detection_iou: float = Field(0.5, gt=0.0, le=1.0)
    max_detections: int = Field(32, ge=1)

    @model_validator(mode="after")
    def _validate(self) -> SegmenterConfig:
        stages = len(self.channels)
        if stages < 1 or {len(self.strides), len(self.anchor_sizes)} != {stages}:
            msg = "channels, strides and anchor sizes need one entry per stage"
            raise ValueError(msg)
        previous = 1
        for stride in self.strides:
            if stride % previous or stride <= previous:
                msg = f"strides {self.strides} must be increasing multiples"
                raise ValueError(msg)
            if self.image_size[0] % stride or self.image_size[1] % stride:
                msg = f"stride {stride} does not divide image size {self.image_size}"
                raise ValueError(msg)
            previous = stride
        if self.mask_size % self.roi_size:
            msg = "mask size must be a multiple of the RoI size"
            raise ValueError(msg)
        if not self.bg_iou <= self.fg_iou:
            msg = "background IoU threshold exceeds the foreground threshold"
            raise ValueError(msg)
        return self


class TrainConfig(_Config):
    """Model representing the training protocol."""

    total_iters: int = Field(2000, ge=1)
    learning_rates: tuple[float, ...] = Field((1e-2, 1e-3, 1e-4))
    lr_milestones: tuple[int, ...] = Field((5000, 7000))
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.0, ge=0.0)
    warmup_iters: int = Field(1000, ge=1)
    teacher_init_iter: int = Field(990, ge=0)
    rampup_iters: int = Field(250, ge=1)
    rampdown_iters: int = Field(250, ge=1)
    alpha_max: float = Field(0.99, ge=0.0, le=1.0)
    gamma: float = Field(5.0, ge=0.0)
    temperature: float = Field(0.5, gt=0.0)
    sharpen_convention: SharpenConvention = Field(SharpenConvention.RECIPROCAL)
    w_background: float = Field(1.5, ge=0.0)
    checkpoint_every: int = Field(500, ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _validate(self) -> TrainConfig:
        if not self.teacher_init_iter < self.warmup_iters < self.total_iters:
            msg = "need teacher_init_iter < warmup_iters < total_iters"
            raise ValueError(msg)
        ramps = self.rampup_iters + self.rampdown_iters
        if self.total_iters < self.warmup_iters + ramps:
            msg = "ramp-up and ramp-down of the unsupervised weight overlap"
            raise ValueError(msg)
        if len(self.learning_rates) != len(self.lr_milestones) + 1:
            msg = "need exactly one more learning rate than milestones"
            raise ValueError(msg)
        if any(rate <= 0 for rate in self.learning_rates):
            msg = "learning rates must be positive"
            raise ValueError(msg)
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            msg = "learning rate milestones must be increasing"
            raise ValueError(msg)
        return self


class MetricReport(BaseModel):
    """Model representing per-class AJI and mAP of one evaluation."""

    CSV_COLUMNS: ClassVar[tuple[str, ...]] = (
        "aji_cyto",
        "aji_nuc",
        "aji_avg",
        "map_cyto",
        "map_nuc",
        "map_avg",
    )

    aji_cyto: float = Field(..., ge=0.0, le=1.0)
    aji_nuc: float = Field(..., ge=0.0, le=1.0)
    aji_avg: float = Field(..., ge=0.0, le=1.0)
    map_cyto: float | None = Field(None, ge=0.0, le=1.0)
    map_nuc: float | None = Field(None, ge=0.0, le=1.0)
    map_avg: float | None = Field(None, ge=0.0, le=1.0)

    @classmethod
    def from_classes(
        cls,
        aji_cyto: float,
        aji_nuc: float,
        map_cyto: float | None,
        map_nuc: float | None,
    ) -> MetricReport:
        """Build a report, averaging the classes; absent mAP values are skipped."""
        present = [value for value in (map_cyto, map_nuc) if value is not None]
        return cls(
            aji_cyto=aji_cyto,
            aji_nuc=aji_nuc,
            aji_avg=(aji_cyto + aji_nuc) / 2,
            map_cyto=map_cyto,
            map_nuc=map_nuc,
            map_avg=sum(present) / len(present) if present else None,
        )

    def csv_row(self) -> list[str]:
        """Return the report values in column order, absent values empty."""
        values = (getattr(self, column) for column in self.CSV_COLUMNS)
        return ["" if value is None else f"{value:.6f}" for value in values]


class TelemetryRecord(BaseModel):
    """Model representing the losses and schedules of one iteration."""

    model_config = ConfigDict(populate_by_name=True)

    t: int = Field(...)
    lr: float = Field(...)
    lam: float = Field(..., alias="lambda")
    alpha: float | None = Field(None)
    s_foreground: int | None = Field(None)
    kept_foreground: int | None = Field(None)
    kept_background: int | None = Field(None)
    l_cls: float = Field(...)
    l_reg: float = Field(...)
    l_seg: float = Field(...)
    l_rpn: float = Field(...)
    l_sup: float = Field(...)
    l_psm: float | None = Field(None)
    l_mgd: float | None = Field(None)
    l_total: float = Field(...)


class SweepCell(BaseModel):
    """Model representing one (fraction, method, seed) run of a sweep."""

    fraction: float = Field(...)
    method: str = Field(...)
    seed: int = Field(...)
    status: str = Field("ok")
    error: str | None = Field(None)
    report: MetricReport | None = Field(None)


class SweepAggregate(BaseModel):
    """Model representing mean and spread of a metric over replicate seeds."""

    fraction: float = Field(...)
    method: str = Field(...)
    replicates: int = Field(...)
    mean: dict[str, float] = Field(...)
    std: dict[str, float] = Field(...)


class SweepReport(BaseModel):
    """Model representing every cell of a sweep and their aggregates."""

    cells: list[SweepCell] = Field([])
    aggregates: list[SweepAggregate] = Field([])


class AuditEntry(BaseModel):
    """Model representing the finite difference check of one loss."""

    coordinates: int = Field(...)
    max_relative_error: float = Field(...)


class AuditReport(BaseModel):
    """Model representing the gradient audit of every loss."""

    tolerance: float = Field(...)
    min_coordinates: int = Field(20)
    entries: dict[str, AuditEntry] = Field(...)
    teacher_gradient_max_abs: float = Field(...)

    @property
    def passed(self) -> bool:
        """Return if every loss is within tolerance and the teacher is constant.

        A loss checked on fewer than min_coordinates coordinates fails.
        """
        return self.teacher_gradient_max_abs == 0.0 and all(
            entry.coordinates >= self.min_coordinates
            and entry.max_relative_error <= self.tolerance
            for entry in self.entries.values()
        )


class ExperimentSpec(_Config):
    """Model representing a complete experiment config file."""

    schema_version: int = Field(SCHEMA_VERSION)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    segmenter: SegmenterConfig = Field(default_factory=SegmenterConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    mode: TrainMode = Field(TrainMode.MMT_PSM)
    ablation: Ablation = Field(Ablation.FULL)
    labeled_fractions: tuple[float, ...] = Field((0.1, 0.2, 0.4, 0.8, 1.0))
    ablation_fraction: float | None = Field(None)
    replicate_seeds: tuple[int, ...] = Field((0,))
    iou_thresholds: tuple[float, ...] = Field(DEFAULT_IOU_THRESHOLDS)

    @model_validator(mode="after")
    def _validate(self) -> ExperimentSpec:
        if self.schema_version != SCHEMA_VERSION:
            msg = f"unsupported schema version {self.schema_version}"
            raise ValueError(msg)
        if not self.labeled_fractions or any(
            not 0.0 < fraction <= 1.0 for fraction in self.labeled_fractions
        ):
            msg = "labeled fractions must lie in (0, 1]"
            raise ValueError(msg)
        fraction = self.ablation_fraction
        if fraction is not None and not 0.0 < fraction <= 1.0:
            msg = "the ablation fraction must lie in (0, 1]"
            raise ValueError(msg)
        if not self.replicate_seeds:
            msg = "at least one replicate seed is required"
            raise ValueError(msg)
        if tuple(self.segmenter.image_size) != tuple(
            self.dataset.generator.image_size
        ):
            msg = "segmenter and generator image sizes differ"
            raise ValueError(msg)
        return self
