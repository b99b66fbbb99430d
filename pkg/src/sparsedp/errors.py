"""Exception hierarchy shared by all modules."""


class SparseDPError(Exception):
    """Base class for package errors."""


class InvalidParameterError(SparseDPError, ValueError):
    """A numeric argument is outside the operation's domain."""


class BudgetOutOfRangeError(InvalidParameterError):
    """A privacy budget lies outside the range a mechanism is valid for."""


class EmptySelectionError(InvalidParameterError):
    """A selection would return no coordinates (floor(gamma * p) == 0)."""


class AssumptionViolatedError(SparseDPError):
    """A privacy accounting hypothesis does not hold.

    Raised instead of returning a budget that could understate the true
    privacy loss.
    """


class InvariantViolation(SparseDPError, RuntimeError):
    """An internal invariant was broken (e.g. an over-cap selection mask)."""
