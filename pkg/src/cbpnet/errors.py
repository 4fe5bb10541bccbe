"""Error taxonomy shared across the package.

Every failure surfaced to callers maps onto one of these classes so the CLI
can translate them into exit codes uniformly.
"""


class CbpNetError(Exception):
    """Base class for all package errors."""


class ShapeError(CbpNetError):
    """Operand shapes are inconsistent with the operation."""


class NumericDomainError(CbpNetError):
    """Non-finite values or degenerate inputs (zero vectors, NaN loss)."""


class ConfigError(CbpNetError):
    """A configuration value violates its constraints."""


class DataError(CbpNetError):
    """Dataset contents are out of bounds (labels, empty splits)."""


class FormatError(CbpNetError):
    """A binary file has the wrong magic or version."""


class CorruptionError(CbpNetError):
    """A binary file is truncated or fails its checksum."""


class IoError(CbpNetError):
    """Filesystem failure while reading or writing results."""


class StateError(CbpNetError):
    """An operation was called before its prerequisites were met."""


class UsageError(CbpNetError):
    """Bad command-line invocation (maps to exit code 2)."""
