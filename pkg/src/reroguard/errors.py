"""Exception types shared across the package."""


class ReroError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(ReroError, ValueError):
    """An argument violates an operation's precondition."""


class BracketExhaustedError(ReroError, RuntimeError):
    """Noise calibration could not reach the target inside its search bracket."""


class UnstableOrderError(ReroError, ArithmeticError):
    """An RDP order is too large to evaluate in floating point."""

    def __init__(self, message, largest_usable_order):
        super().__init__(message)
        self.largest_usable_order = largest_usable_order
