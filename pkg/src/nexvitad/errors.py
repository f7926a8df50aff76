"""Exception types shared across the package."""


class NexViTADError(Exception):
    """Base class for all package errors."""


class ShapeError(NexViTADError, ValueError):
    """Operand dimensions are incompatible.

    ``left`` and ``right`` carry the names and shapes of the two operands
    involved so callers can report which pair disagreed.
    """

    def __init__(self, message, left=None, right=None):
        self.left = left
        self.right = right
        if left is not None and right is not None:
            message = f"{message}: {left[0]}{tuple(left[1])} vs {right[0]}{tuple(right[1])}"
        super().__init__(message)


class ParameterError(NexViTADError, ValueError):
    """An argument value is outside its valid range."""


class ContractError(NexViTADError, RuntimeError):
    """An operation was attempted that its contract forbids."""


class ConfigError(NexViTADError, ValueError):
    """Run configuration is inconsistent with the data or model."""


class DataError(NexViTADError, ValueError):
    """Input data is malformed or violates a dataset invariant."""


class UndefinedMetricError(NexViTADError, ValueError):
    """A metric is undefined for the given labels (e.g. a single class)."""


class NumericError(NexViTADError, ArithmeticError):
    """A computation produced non-finite values."""
