"""Exception types raised across the package."""


class S2RMError(Exception):
    """Base class for all package errors."""


class DimensionError(S2RMError, ValueError):
    """Operand shapes are inconsistent."""


class DegenerateInputError(S2RMError, ValueError):
    """Input has no defined direction (e.g. normalizing a zero vector)."""


class ConfigError(S2RMError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class InputError(S2RMError, ValueError):
    """Input lies outside the supported domain."""


class NumericError(S2RMError, ArithmeticError):
    """Non-finite value encountered."""


class FormatError(S2RMError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
