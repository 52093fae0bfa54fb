"""Exception types shared across the package."""


class MflprError(Exception):
    """Base class for all errors raised by mflpr."""


class ParameterError(MflprError, ValueError):
    """An argument is outside its valid domain."""


class MalformedFileError(MflprError):
    """A scan, CSV or descriptor file cannot be parsed."""


class ConfigError(MflprError):
    """Invalid configuration file, key or value."""


class DataError(MflprError):
    """Input data is missing or inconsistent (missing scans, GT rows, index version...)."""
