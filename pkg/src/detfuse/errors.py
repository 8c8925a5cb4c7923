"""Exception hierarchy shared across the fusion pipeline."""


class DetfuseError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(DetfuseError):
    """A domain object or frame violates one of its invariants."""


class NonFiniteField(ValidationError):
    """A numeric field is NaN or infinite; the message names the record."""


class ScoreOutOfRange(ValidationError):
    """A detection confidence score lies outside [0, 1]."""


class EmptyCalibration(ValidationError):
    """A frame carries no usable camera calibration."""


class DegenerateBaseline(DetfuseError):
    """Stereo baseline is numerically zero; no epipolar geometry exists."""


class ZeroLine(DetfuseError):
    """An epipolar line collapsed to the null vector."""


class CliqueExplosion(DetfuseError):
    """Maximal-clique enumeration exceeded the configured cap."""


class MissingMask(DetfuseError):
    """Frustum mode requires an instance mask the detection does not have."""


class PlacementFailure(DetfuseError):
    """Scene generator could not place an object after bounded attempts."""


class FormatError(DetfuseError):
    """Base class for file reader/writer errors."""


class TruncatedFile(FormatError):
    """Binary file length is not a whole number of records."""


class NonFiniteValue(FormatError):
    """A parsed value is NaN or infinite; the message carries the offset."""


class MissingKey(FormatError):
    """A required key is absent from a calibration or config file."""


class BadDimension(FormatError):
    """A parsed matrix or vector has the wrong shape."""


class SchemaViolation(FormatError):
    """A detection record does not satisfy the file schema."""
