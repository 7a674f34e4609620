"""Exception types raised across the package."""


class FlareError(Exception):
    """Base class for all package errors."""


class ShapeError(FlareError, ValueError):
    pass


class InvalidArgument(FlareError, ValueError):
    pass


class NumericalBreakdown(FlareError, ArithmeticError):
    """A solver or network evaluation produced non-finite values."""


class NotPositiveDefinite(FlareError, ArithmeticError):
    pass


class RankDeficient(FlareError, ArithmeticError):
    pass


class ResourceLimit(FlareError, MemoryError):
    pass


class UndefinedBaseline(FlareError, ArithmeticError):
    """Gap-closure is undefined when the unfiltered accuracy is exactly chance."""


class SchemaError(FlareError, ValueError):
    """Config, checkpoint or report did not match the expected schema."""
