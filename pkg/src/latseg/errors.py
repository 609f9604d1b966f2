"""Exception types shared across the package.

Every error raised by library code derives from LatSegError so callers can
catch one base class. The CLI maps ConfigError/ParseError to exit code 2
(bad invocation or bad file) and everything else to exit code 1.
"""


class LatSegError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(LatSegError):
    """Input values are malformed (non-finite, out of range, wrong width)."""


class EmptyInput(LatSegError):
    """An operation that needs at least one element received none."""


class ShapeError(LatSegError):
    """Array shapes are inconsistent with each other or with a contract."""


class UnsupportedError(LatSegError):
    """A requested variant is outside what this implementation supports."""


class ConfigError(LatSegError):
    """A configuration value or selection is invalid or missing."""


class ParseError(LatSegError):
    """A file or string could not be parsed.

    `line` is the 1-based line number when known; it is folded into the
    message so plain str(err) is informative.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StateError(LatSegError):
    """An operation requires retained state that is absent or consumed."""


class DegenerateBatch(LatSegError):
    """A training batch carries no usable supervision."""


class NonFiniteGradient(LatSegError):
    """An optimizer step was refused because a gradient is not finite."""


class EmptyEvaluation(LatSegError):
    """An evaluation had no valid points to score."""
