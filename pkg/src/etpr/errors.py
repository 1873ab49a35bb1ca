"""Exception types raised by the eTPR routines."""


class EtprError(Exception):
    """Base class for all package errors."""


class SingularScale(EtprError, ValueError):
    """A scale matrix could not be made positive definite."""

    def __init__(self, message, curve=None, params=None):
        if curve is not None:
            message = f"{message} (curve {curve})"
        super().__init__(message)
        self.curve = curve
        self.params = params


class DimensionError(EtprError, ValueError):
    pass


class RankError(EtprError, ValueError):
    pass


class NuOutOfDomain(EtprError, ValueError):
    pass


class InvalidOptions(EtprError, ValueError):
    pass


class NumericalError(EtprError, ArithmeticError):
    pass


class HessianNotPD(EtprError, ArithmeticError):
    pass


class UnknownCurve(EtprError, IndexError):
    """A curve index outside the fitted data set."""
