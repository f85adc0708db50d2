"""Exception types shared across the package.

The CLI maps ConfigError to exit code 2 and every other Mp4srError to
exit code 1.
"""


class Mp4srError(Exception):
    """Base class for all package errors."""


class ConfigError(Mp4srError):
    """Invalid configuration: bad values, unknown keys, contradictory flags."""


class DataError(Mp4srError):
    """Malformed input data or file format violations."""


class ContractError(Mp4srError):
    """An operation was called outside its contract."""


class ShapeError(ContractError):
    """Operand shapes are incompatible."""


class NonFiniteError(Mp4srError):
    """A NaN or Inf appeared where only finite values are allowed."""
