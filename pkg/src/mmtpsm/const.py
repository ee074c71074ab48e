"""Constants for the mean teacher framework."""

from enum import Enum, IntEnum

SCHEMA_VERSION = 1
CHECKPOINT_VERSION = 1
SCENE_MAGIC = b"MMTS"

NUM_CLASSES = 3
LOG_FLOOR = 1e-12

DEFAULT_IOU_THRESHOLDS: tuple[float, ...] = tuple(
    round(0.5 + 0.05 * i, 2) for i in range(10)
)
RECALL_POINTS = 101


class CellClass(IntEnum):
    """Enum holding the class ids of the classification head."""

    BACKGROUND = 0
    CYTOPLASM = 1
    NUCLEUS = 2


FOREGROUND_CLASSES = (CellClass.CYTOPLASM, CellClass.NUCLEUS)


class TrainMode(str, Enum):
    """Enum holding the training modes."""

    MMT_PSM = "mmt_psm"
    SUPERVISED_ONLY = "supervised_only"


class Ablation(str, Enum):
    """Enum holding the component ablations."""

    FULL = "full"
    NO_MGD = "no_mgd"
    NO_PSM = "no_psm"


class ProposalSource(str, Enum):
    """Enum holding which proposal network produced a batch."""

    TEACHER_RPN = "teacher_rpn"
    STUDENT_RPN = "student_rpn"


class SharpenConvention(str, Enum):
    """Enum holding the exponent convention of the sharpen function."""

    RECIPROCAL = "reciprocal"
    LITERAL = "literal"


class ExitCode(IntEnum):
    """Enum holding the process exit codes of the command line."""

    OK = 0
    CONFIG_ERROR = 2
    DATA_ERROR = 3
    NUMERICAL_ABORT = 4
    CHECKPOINT_ERROR = 5


class SeedStream(IntEnum):
    """Enum holding the independent random streams derived from a run seed."""

    INIT = 0
    LABELED = 1
    UNLABELED = 2
    VIEWS = 3
    SUBSET = 4
    AUDIT = 5
