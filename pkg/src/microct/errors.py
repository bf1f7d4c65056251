"""Exception hierarchy shared across the package."""


class MicroCTError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(MicroCTError, ValueError):
    """A precondition on an argument was violated."""


class GeometryMismatchError(InvalidArgumentError):
    """Array shapes do not match the scan geometry."""


class CorruptDatasetError(MicroCTError):
    """A stored dataset or checkpoint failed an integrity check."""


class UnsupportedVersionError(CorruptDatasetError):
    """A stored artifact declares a format version this code cannot read."""


class TrainingDivergedError(MicroCTError):
    """The training loss became non-finite."""
