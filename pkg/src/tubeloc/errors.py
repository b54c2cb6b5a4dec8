"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``DataError`` subclasses exit with 2,
``StageError`` subclasses with 3.
"""


class TubelocError(Exception):
    """Base class for all errors raised by this package."""


class DataError(TubelocError):
    """Input data could not be read or is inconsistent."""


class ParseError(DataError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedFormatError(DataError):
    pass


class ShapeError(DataError):
    """Tensor or weight shapes disagree."""


class StageError(TubelocError):
    """A pipeline stage failed on otherwise valid input."""

    stage = "pipeline"

    def __init__(self, message, stage=None):
        if stage is not None:
            self.stage = stage
        super().__init__(f"[{self.stage}] {message}")


class EmptyDetectionError(StageError):
    stage = "detect"


class NoContourError(StageError):
    stage = "contours"


class DegenerateFitError(StageError):
    stage = "fit"


class IntersectionError(StageError):
    stage = "endpoints"


class MissingDepthError(StageError):
    stage = "lift"
