"""Exception types shared across the package."""


class HistodiffError(Exception):
    """Base class for all package-specific errors."""


class FormatError(HistodiffError):
    """A file does not conform to the on-disk container format."""


class ConfigError(HistodiffError):
    """A configuration value is out of range or inconsistent."""


class DataError(HistodiffError):
    """Input data violates a documented invariant."""


class NumericalError(HistodiffError):
    """A computation produced non-finite or otherwise invalid numbers."""


class UndefinedMetricError(HistodiffError):
    """A metric is mathematically undefined for the given inputs (e.g. empty ground truth)."""
