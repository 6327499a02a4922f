"""Exception types shared across the package."""


class DcscnError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(DcscnError, ValueError):
    """Operand shapes are incompatible (kernel too large, empty input, ...)."""


class NumericError(DcscnError, ValueError):
    """Non-finite values or an ill-posed numeric request."""


class ConfigError(DcscnError, ValueError):
    """Invalid configuration or argument value."""


class DataError(DcscnError, ValueError):
    """Dataset ingestion or consistency failure."""


class BuildError(DcscnError, RuntimeError):
    """Network construction could not proceed."""
