"""Exception types shared across the package."""


class ParaVaeError(Exception):
    """Base class for all library errors."""


class ShapeMismatchError(ParaVaeError, ValueError):
    pass


class IndexOutOfBoundsError(ParaVaeError, IndexError):
    pass


class NonFiniteError(ParaVaeError, FloatingPointError):
    """An operation produced NaN or Inf."""


class NonScalarLossError(ParaVaeError, ValueError):
    pass


class EmptySequenceError(ParaVaeError, ValueError):
    pass


class DataFormatError(ParaVaeError, ValueError):
    """Input data could not be parsed (too many malformed records, bad schema)."""


class CheckpointError(ParaVaeError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ManifestCorruptionError(CheckpointError):
    pass


class TrainingDivergedError(ParaVaeError):
    """Loss became non-finite. ``checkpoint`` holds the last good state."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class PosteriorUnavailableError(ParaVaeError, ValueError):
    pass
