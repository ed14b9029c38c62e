"""Exception hierarchy shared by the library and the CLI."""


class LangevinDPError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(LangevinDPError, ValueError):
    """Inputs violate a documented precondition."""


class NumericalError(LangevinDPError, ArithmeticError):
    """A computation produced non-finite values or failed to converge."""


class PreTransitionError(ValidationError):
    """A long-term divergence bound was evaluated before its start time t0."""


class ConvergenceError(NumericalError):
    """An iterative solver stopped before reaching its tolerance."""
