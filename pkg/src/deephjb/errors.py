"""Exception hierarchy shared across the package."""


class DeepHJBError(Exception):
    """Base class for all package errors."""


class ConfigError(DeepHJBError, ValueError):
    """Invalid configuration, unknown keys, or an unsupported combination."""


class ShapeError(DeepHJBError, ValueError):
    """Array dimensions that do not match the declared problem or network."""


class NumericError(DeepHJBError, ArithmeticError):
    """Non-finite values or failed numerical routines."""


class ConditioningError(NumericError):
    """The effective control-cost matrix is singular or not positive definite."""

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class RolloutDivergence(NumericError):
    """A simulated path left the finite / bounded region."""

    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class CheckpointError(DeepHJBError):
    """Unreadable checkpoint or a checkpoint that does not match the problem."""


class UsageError(DeepHJBError, ValueError):
    """An API called with arguments that contradict its contract."""
