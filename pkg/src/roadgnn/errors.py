class RoadGnnError(Exception):
    """Base class for all package errors."""


class ParseError(RoadGnnError, ValueError):
    pass


class ReferentialIntegrityError(RoadGnnError, ValueError):
    pass


class NonFiniteError(RoadGnnError, ArithmeticError):
    """Raised when a loss or gradient stops being finite."""


class StaleCacheError(RoadGnnError, RuntimeError):
    """A forward cache was used after the model parameters changed."""
