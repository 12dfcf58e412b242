"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError/InputError -> 1,
DataError -> 2, NumericalError -> 3.
"""


class FpmineError(Exception):
    """Base class for all package errors."""


class ShapeError(FpmineError, ValueError):
    """Array dimensions do not satisfy an operation's contract."""


class ContractError(FpmineError, ValueError):
    """An API was called outside its stated contract (e.g. non-scalar backward root)."""


class InputError(FpmineError, ValueError):
    """A runtime input value is invalid (label out of range, bad text length, ...)."""


class ConfigError(FpmineError, ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(FpmineError, ValueError):
    """A dataset or checkpoint file is missing, truncated, or malformed."""


class NumericalError(FpmineError, RuntimeError):
    """A computation produced NaN/Inf or diverged."""
