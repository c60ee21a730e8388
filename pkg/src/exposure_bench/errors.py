"""Exception types raised across the toolkit.

Every named failure mode gets its own class so callers (and the CLI exit-code
mapping) can distinguish bad input from a broken environment.
"""


class ExposureBenchError(Exception):
    """Base class for all toolkit errors."""


class DimensionMismatch(ExposureBenchError):
    """Images that must share dimensions do not."""


class InsufficientExposureSpan(ExposureBenchError):
    """A calibration stack has too few images or too narrow an exposure range."""


class NonStaticStack(ExposureBenchError):
    """Calibration residuals are too large for a static-scene stack."""


class NoOverlap(ExposureBenchError):
    """Two trajectories share no time-associated poses."""


class TrajectoryTooShort(ExposureBenchError):
    """The reference trajectory is shorter than the evaluation window."""


class EmptyInput(ExposureBenchError):
    """An aggregate was requested over zero items."""


class DegenerateInput(ExposureBenchError):
    """Pooled samples carry no rank information (every value identical)."""


class MissingManifest(ExposureBenchError):
    """A sequence directory has no manifest file."""


class CorruptImage(ExposureBenchError):
    """An image file could not be read or has unexpected shape."""


class LadderMismatch(ExposureBenchError):
    """A manifest exposure ladder violates its ordering contract."""


class RangeViolation(ExposureBenchError):
    """Pixel data exceeds the 12-bit range."""


class IoFailure(ExposureBenchError):
    """A write to disk failed."""


class ParseError(ExposureBenchError):
    """A text file (trajectory, response table, CSV) could not be parsed."""


class NonMonotoneTimestamps(ExposureBenchError):
    """Trajectory timestamps are not strictly increasing."""


class BadQuaternion(ExposureBenchError):
    """A quaternion is too far from unit norm to renormalize."""


class ControllerFault(ExposureBenchError):
    """An exposure controller (typically an external plugin) failed mid-run."""
