"""Exception hierarchy shared by every module."""


class MPDRError(Exception):
    """Base class for all package errors."""


class InputError(MPDRError, ValueError):
    """Malformed numeric input: non-finite scores, dimension mismatch, ..."""


class ConfigError(MPDRError, ValueError):
    """Inconsistent configuration."""


class UsageError(MPDRError, ValueError):
    """An operation was called with arguments outside its contract."""


class ParseError(MPDRError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(MPDRError, ValueError):
    """Structurally valid data that violates a cross-reference invariant."""


class MetricError(MPDRError, ValueError):
    """Metric undefined for the given input (e.g. empty relevant set)."""


class NumericalError(MPDRError, ArithmeticError):
    """Non-finite loss or gradient during training."""


class OracleError(MPDRError, ArithmeticError):
    """The reference implementation could not evaluate its input."""
