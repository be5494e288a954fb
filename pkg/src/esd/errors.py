"""Exception types shared across the package.

The CLI maps each family to an exit code, so raise the most specific one.
"""

from __future__ import annotations


class EsdError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(EsdError, ValueError):
    pass


class ConfigError(EsdError, ValueError):
    pass


class DataError(EsdError, ValueError):
    pass


class FormatError(DataError):
    """Malformed file contents. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(EsdError, ArithmeticError):
    pass


class StateError(EsdError, RuntimeError):
    pass


class EvalError(EsdError, ValueError):
    pass
