"""Shared exception types.

ValidationError maps to CLI exit code 2, NumericError to exit code 3.
"""


class ValidationError(ValueError):
    """Malformed input: bad file, bad flag value, violated precondition."""


class NumericError(RuntimeError):
    """Non-finite values or a numerically degenerate state."""


class ShapeError(ValidationError):
    """Operand shapes do not conform for an array operation."""


class DegenerateMaskError(NumericError):
    """A rendered character mask covers no pixels (total collapse)."""


class EngineError(RuntimeError):
    """Misuse of the differentiation graph (e.g. double backward)."""
