"""Exception hierarchy. The CLI maps these onto exit codes (see cli.EXIT_*)."""


class EmofuseError(Exception):
    """Base class for all errors raised by this package."""


class ArgumentError(EmofuseError):
    """Caller passed an invalid argument value."""


class DimensionError(ArgumentError):
    """Array shapes are incompatible; message names both shapes."""


class ConfigError(ArgumentError):
    """A run configuration is invalid or inconsistent."""


class DataError(EmofuseError):
    """Sample data is missing or malformed (e.g. label absent)."""


class FormatError(DataError):
    """An on-disk container has a bad magic or unsupported version."""


class CorruptionError(FormatError):
    """An on-disk container is truncated or garbled; message carries the byte offset."""


class CheckpointError(DataError):
    """A model checkpoint has the wrong kind, version, or dimensions."""


class NumericError(EmofuseError):
    """Training produced non-finite values (NaN/Inf loss or gradients)."""


class OracleError(EmofuseError):
    """A verification oracle's precondition is violated (e.g. non-deterministic loss)."""
