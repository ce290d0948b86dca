"""Exception types shared across the package."""


class FedMtdError(Exception):
    """Base class for every error raised by fedmtd."""


class ConfigurationError(FedMtdError, ValueError):
    """Invalid configuration or precondition on construction parameters."""


class ShapeError(FedMtdError, ValueError):
    """Array dimensions do not agree."""


class DomainError(FedMtdError, ValueError):
    """Argument outside the domain of an operation (e.g. Normal where malware is required)."""


class NumericError(FedMtdError, ArithmeticError):
    """A non-finite value appeared in a numeric computation."""


class UsageError(FedMtdError, RuntimeError):
    """API used out of order, e.g. a stale forward cache passed to backward."""


class TrainingError(FedMtdError, RuntimeError):
    """Model training diverged."""


class ParseError(FedMtdError, ValueError):
    """Malformed input file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
