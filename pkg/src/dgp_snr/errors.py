"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class NotPositiveDefinite(ArithmeticError):
    """Cholesky factorization failed.

    ``pivot`` is the 1-based order of the leading minor that is not
    positive definite, as reported by LAPACK dpotrf.
    """

    def __init__(self, pivot, message=None):
        self.pivot = int(pivot)
        super().__init__(message or f"matrix not positive definite at pivot {pivot}")


class InvalidParameter(ValueError):
    """A parameter value violates its domain (e.g. a variance <= 0)."""


class InvalidMode(RuntimeError):
    """Operation is not available in the current encoder mode."""


class StepRejected(RuntimeError):
    """A natural-gradient step could not produce a valid covariance."""


class ParseError(ValueError):
    """A CSV cell or row could not be parsed.  ``line`` is 1-based."""

    def __init__(self, line, message):
        self.line = int(line)
        super().__init__(f"line {line}: {message}")


class SchemaError(ValueError):
    """A file or config violates its declared schema."""


class IoError(OSError):
    """A file could not be read or written."""


class Undefined(ArithmeticError):
    """The requested statistic is undefined for the given input."""
