"""Exception types shared across the package."""


class GradrepError(Exception):
    """Base class for all package errors."""


class ShapeError(GradrepError, ValueError):
    """Incompatible tensor/kernel shapes; the message names both shapes."""


class UsageError(GradrepError, RuntimeError):
    """API called out of order or with inconsistent arguments."""


class ConfigError(GradrepError, ValueError):
    """Bad run configuration (unknown key, unparsable value, missing field)."""


class DataFormatError(GradrepError, ValueError):
    """Malformed dataset, scales, or checkpoint bytes."""


class FormatVersionError(DataFormatError):
    """A persisted file declares a format version this build does not read."""
