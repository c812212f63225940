"""Exception types shared across the package."""


class LipspeechError(Exception):
    """Base class for all package errors."""


class InputError(LipspeechError, ValueError):
    """Raised when an input violates a documented precondition."""


class NumericalError(LipspeechError, ArithmeticError):
    """Raised when a computation produces NaN/Inf values."""
