"""Exception hierarchy shared by every oddvox module."""


class OddvoxError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(OddvoxError, ValueError):
    pass


class ConfigError(OddvoxError, ValueError):
    pass


class ValidationError(OddvoxError, ValueError):
    pass


class UsageError(OddvoxError, RuntimeError):
    pass


class NumericError(OddvoxError, FloatingPointError):
    """A NaN or Inf appeared in a forward or backward pass."""


class GenerationError(OddvoxError, RuntimeError):
    pass


class DatasetError(OddvoxError, OSError):
    pass


class DatasetVersionError(DatasetError):
    pass


class CheckpointError(OddvoxError, OSError):
    pass


class ExternalServiceError(OddvoxError, RuntimeError):
    pass
