"""Exception hierarchy shared across the package."""


class DrnetError(Exception):
    """Base class for all package errors."""


class ValidationError(DrnetError):
    """Input data violates a structural requirement."""


class ParseError(ValidationError):
    """A file could not be parsed; carries the offending row when known."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class ConfigError(DrnetError):
    """Run configuration is invalid."""


class DegenerateThresholdError(DrnetError):
    """All binarized outcomes are identical at a threshold."""

    def __init__(self, threshold, message=None):
        self.threshold = threshold
        super().__init__(message or f"degenerate threshold y={threshold!r}: "
                                    "all indicators identical")


class ConvergenceError(DrnetError):
    """Solver failed to converge; carries the best iterate found."""

    def __init__(self, message, best=None, grad_norm=None):
        super().__init__(message)
        self.best = best
        self.grad_norm = grad_norm


class SingularSystemError(DrnetError):
    """A weighted system is singular beyond the known location null space."""


class InferenceError(DrnetError):
    """Standard error or bootstrap computation is ill-defined."""
