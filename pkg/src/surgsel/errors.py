"""Exception types shared across the package."""


class SurgselError(Exception):
    """Base class for all package errors."""


class DataError(SurgselError, ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(SurgselError, ArithmeticError):
    """A computation could not be completed to the required accuracy."""


class ConvergenceError(NumericalError):
    """An iterative solver hit its iteration budget."""
