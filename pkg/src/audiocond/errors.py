"""Exception types shared across the package.

User-facing commands map these onto exit codes: anything deriving from
``UserInputError`` exits 2, ``DivergenceError`` exits 3.
"""


class AudiocondError(Exception):
    pass


class UserInputError(AudiocondError, ValueError):
    """Bad input supplied by the caller (file, argument, shape, ...)."""


class DimensionError(UserInputError):
    """Shape or dimensionality does not match the contract."""


class ParameterError(UserInputError):
    """Scalar parameter outside its valid range."""


class InvalidInputError(UserInputError):
    """Empty, malformed, or otherwise unusable input data."""


class SampleRateError(InvalidInputError):
    """Audio is not at the sample rate the operation requires."""


class DecodeError(InvalidInputError):
    """Audio file could not be decoded."""


class ParseError(UserInputError):
    """A serialized file (manifest, tensor, condition) failed to parse."""


class ConfigError(UserInputError):
    """Inconsistent model or run configuration."""


class UndefinedMetricError(UserInputError):
    """Metric has no defined value for these inputs (e.g. zero variance)."""


class CaptureError(AudiocondError, RuntimeError):
    """Attention maps requested but capture was not enabled."""


class DivergenceError(AudiocondError, RuntimeError):
    """Training produced a non-finite loss."""
