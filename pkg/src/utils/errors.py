"""
Error Types

Exception hierarchy shared by every service. The command-line layer maps
any PhmmError to a non-zero exit code with its message.
"""


class PhmmError(Exception):
    """Base class for all recognizer errors."""


class ConfigurationError(PhmmError):
    """A configuration value is out of range or inconsistent."""


class FrameGeometryError(PhmmError):
    """An image does not fit the sliding-window geometry."""


class InfeasibleAlignmentError(PhmmError):
    """A line has fewer frames than its transcript's minimum state count."""

    def __init__(self, num_frames: int, required: int):
        super().__init__(
            f"Alignment infeasible: {num_frames} frames for {required} states"
        )
        self.num_frames = num_frames
        self.required = required


class InvariantViolationError(PhmmError):
    """Internal statistics violate a structural invariant."""


class DataMismatchError(PhmmError):
    """Labels, scores or models disagree on their dimensions."""


class UnknownWriterError(PhmmError):
    """A line refers to a writer without a code."""


class CodeDimensionError(PhmmError):
    """A writer code has the wrong length for the model."""


class EmptyInputError(PhmmError):
    """An operation received nothing to work on."""


class ArtifactError(PhmmError):
    """An artifact is missing or malformed."""


class ArtifactVersionError(ArtifactError):
    """An artifact was written by an incompatible format version."""
