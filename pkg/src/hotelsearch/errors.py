"""Shared exception types.

The CLI maps these onto exit codes: usage problems are handled by the
argument parser, InputError/ConfigError/ParseError exit with 2, and
NumericError (NaN aborts) exits with 3.
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class LengthError(ValueError):
    """A sequence exceeds a configured maximum length."""


class InputError(ValueError):
    """Caller passed invalid data (bad labels, unknown ids, empty input)."""


class ConfigError(ValueError):
    """A configuration value or key is invalid."""


class ContractError(RuntimeError):
    """An internal precondition was violated (e.g. non-scalar backward root)."""


class NumericError(RuntimeError):
    """Non-finite values appeared where finite math was required."""


class ParseError(ValueError):
    """A persisted file is malformed."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
