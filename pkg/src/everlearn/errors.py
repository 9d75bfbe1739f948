"""Exception types shared across the package.

Every error raised by everlearn derives from :class:`EverlearnError`, so
callers can catch one base class. The CLI maps subclasses to exit codes
(config -> 1, I/O -> 2, numeric -> 3).
"""


class EverlearnError(Exception):
    """Base class for all everlearn errors."""


class DimensionError(EverlearnError):
    """Tensor shapes are incompatible for the requested operation."""


class ParameterError(EverlearnError):
    """An argument is outside its allowed range (e.g. tau <= 0)."""


class DomainError(EverlearnError):
    """An input value is outside the mathematical domain (e.g. log of negative)."""


class DataError(EverlearnError):
    """Dataset contents violate a contract (bad label, count mismatch)."""


class ContractError(EverlearnError):
    """An API contract was violated (e.g. non-scalar loss passed to backward)."""


class FormatError(EverlearnError):
    """A file is not in the expected binary format."""


class NumericError(EverlearnError):
    """A computation produced a non-finite value where finiteness is required."""


class ConfigError(EverlearnError):
    """A run configuration is invalid (unknown key, bad value)."""
