"""Exception hierarchy shared by every module of the package."""


class CapkitError(Exception):
    """Base class for all package errors."""


class ConfigError(CapkitError, ValueError):
    """A scenario or argument violates a documented invariant.

    ``field`` names the offending configuration entry when one applies.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class NumericalError(CapkitError, ArithmeticError):
    """A computation produced non-finite values or an ill-conditioned system."""


class QuadratureError(NumericalError):
    """Adaptive quadrature failed to reach the requested accuracy."""


class ConvergenceError(NumericalError):
    """An iterative solver exhausted its iteration budget."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")


class DegenerateVarianceError(NumericalError):
    """The fluctuation matrix has the wrong determinant sign, so no variance exists."""
