"""Exception hierarchy shared across the package."""


class SpeechSeekError(Exception):
    """Base class for all package errors."""


class ConfigError(SpeechSeekError):
    """Invalid configuration value or combination."""


class DataError(SpeechSeekError):
    """Malformed or out-of-contract input data."""


class ShapeError(SpeechSeekError):
    """Tensor shape or dimensionality mismatch."""


class ParseError(DataError):
    """Corpus/config file could not be parsed.

    Carries the 1-based line number of the offending record when known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateWeightsError(DataError):
    """All integrate-and-fire weights are zero; nothing can fire."""


class DegenerateVectorError(DataError):
    """Zero-norm vector where a direction is required."""


class DegenerateTargetError(DataError):
    """Loss target contains no usable (non-pad) positions."""


class MetricError(SpeechSeekError):
    """Metric is undefined for the given inputs."""


class IntegrityError(DataError):
    """Binary artifact failed its checksum."""


class VersionError(DataError):
    """Binary artifact written by an incompatible format version."""


class TrainingAbort(SpeechSeekError):
    """Training hit a non-recoverable numeric failure (e.g. NaN loss)."""
