"""Exception hierarchy shared by all modules."""


class PrsMpcError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(PrsMpcError, ValueError):
    pass


class NotStable(PrsMpcError, ValueError):
    """A matrix that must be Schur stable has spectral radius >= 1."""


class IndexOutOfRange(PrsMpcError, IndexError):
    pass


class WindowExceedsHorizon(PrsMpcError, ValueError):
    pass


class InvalidProbability(PrsMpcError, ValueError):
    pass


class CenterMismatch(PrsMpcError, ValueError):
    pass


class EmptySchedule(PrsMpcError, ValueError):
    pass


class EmptyResult(PrsMpcError, ValueError):
    """Tightening removed the whole constraint set."""


class AssumptionViolated(PrsMpcError, ValueError):
    """A terminal ingredient fails one of its defining conditions.

    The ``condition`` attribute names the failing check.
    """

    def __init__(self, condition, message=None):
        self.condition = condition
        super().__init__(message or condition)


class Infeasible(PrsMpcError, RuntimeError):
    pass


class MaxIterations(PrsMpcError, RuntimeError):
    pass


class UnstableDiscretization(PrsMpcError, ValueError):
    pass


class ConfigError(PrsMpcError, ValueError):
    """Invalid run configuration; ``field`` names the offending entry."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
