from typing import Optional


class CortolamError(Exception):
    """Base class of all errors raised by cortolam.

    The console reports these errors as ``[<category>] <message>`` and exits with
    :attr:`exit_code` instead of printing a traceback.
    """

    category: str = "error"
    exit_code: int = 1


class ConfigError(CortolamError, ValueError):
    """Invalid configuration value."""

    category = "config"


class MissingInputError(CortolamError, FileNotFoundError):
    """An input artifact of a command does not exist."""

    category = "input"
    exit_code = 2


class SchemaError(CortolamError, ValueError):
    """A table misses a required column or does not match the expected schema.

    Args:
        message: Description of the problem.
        column: Name of the offending column, if any.
    """

    category = "schema"
    exit_code = 3

    def __init__(self, message: str, column: Optional[str] = None):
        super().__init__(message)
        self.column = column


class RecordValidationError(CortolamError, ValueError):
    """A record violates its invariants.

    Args:
        message: Description of the problem.
        line: 1-based line number in the source file (the header is line 1).
    """

    category = "validation"
    exit_code = 3

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class LabelParseError(CortolamError, ValueError):
    """Unknown layer token."""

    category = "parse"
    exit_code = 3


class UnknownIdError(CortolamError, KeyError):
    """A record refers to a neuron id that does not exist."""

    category = "reference"
    exit_code = 3

    def __str__(self) -> str:
        # KeyError quotes its message by default
        return str(self.args[0]) if self.args else ""


class DegenerateDataError(CortolamError, ValueError):
    """The data cannot support the requested computation (e.g. all values identical)."""

    category = "degenerate"
    exit_code = 4


class DegenerateHullError(DegenerateDataError):
    """Fewer than three points or all points collinear."""


class FeatureUnavailableError(DegenerateDataError):
    """A derived feature block cannot be computed from the available tags."""


class ModelFormatError(CortolamError, ValueError):
    """Malformed, truncated or incompatible model file."""

    category = "model"
    exit_code = 5
