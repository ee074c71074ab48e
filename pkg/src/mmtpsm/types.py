"""Type definitions."""

from __future__ import annotations

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DatasetError",
    "DatasetReadError",
    "DatasetWriteError",
    "GeometryError",
    "LayoutMismatchError",
    "MMTPSMError",
    "MaskShapeError",
    "MissingAnnotationsError",
    "NumericalAbortError",
]


class MMTPSMError(Exception):
    """Base mmtpsm exception."""


class ConfigError(MMTPSMError):
    """Configuration file or flags are invalid."""


class DatasetError(MMTPSMError):
    """Exception in the scene dataset."""


class DatasetWriteError(DatasetError):
    """Writing scenes or the manifest failed."""


class DatasetReadError(DatasetError):
    """Reading scenes or the manifest failed."""


class MaskShapeError(DatasetReadError):
    """Run-length counts do not describe a mask of the declared size."""


class MissingAnnotationsError(DatasetError):
    """A supervised operation got a scene without annotations."""


class GeometryError(MMTPSMError):
    """Boxes, images or feature maps have unusable geometry."""


class LayoutMismatchError(MMTPSMError):
    """Two parameter vectors do not share the same layout."""


class CheckpointError(MMTPSMError):
    """Checkpoint could not be written or read."""


class NumericalAbortError(MMTPSMError):
    """A loss became non-finite and training was aborted."""

    def __init__(self, msg: str, components: dict[str, float]) -> None:
        """Initialize with the loss components at the time of the abort."""
        super().__init__(msg)
        self.components = components
