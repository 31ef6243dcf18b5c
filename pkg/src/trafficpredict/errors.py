"""Exception hierarchy shared across the package."""


class TrafficPredictError(Exception):
    """Base class for all package errors."""


class DimensionError(TrafficPredictError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(TrafficPredictError, ArithmeticError):
    """A computation produced NaN or Inf."""


class NumericDomainError(NumericError):
    """An operation was applied outside its domain (e.g. log of a non-positive value)."""


class UsageError(TrafficPredictError, ValueError):
    """An API was called with arguments that violate its preconditions."""


class ConfigurationError(TrafficPredictError, ValueError):
    """Invalid or inconsistent configuration."""


class ParseError(TrafficPredictError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(TrafficPredictError, ValueError):
    """Input parsed correctly but violates a data invariant."""
