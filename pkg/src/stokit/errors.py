"""Exception hierarchy shared by every stokit module."""


class StokitError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(StokitError, ValueError):
    """Arguments violate a documented precondition."""


class GridRangeError(StokitError, ValueError):
    """A time is off-grid or falls outside the sampled window."""


class CapabilityError(StokitError):
    """The model lacks something the operation needs (Jacobians, noise structure)."""


class DataError(StokitError, ValueError):
    """A user-supplied sampler or field produced non-finite values."""


class BlowUpError(StokitError, ArithmeticError):
    """A trajectory left the finite range."""

    def __init__(self, time, message=None):
        self.time = float(time)
        super().__init__(message or f"trajectory blew up at t={self.time:g}")


class EnsembleFailure(StokitError):
    """Too many paths of an ensemble blew up or were censored."""


class SingularOperatorError(StokitError, ArithmeticError):
    """The discretized generator cannot be inverted."""


class CensoringError(EnsembleFailure):
    """Too many exit-time samples hit the time cap."""


class UndefinedQuantileError(StokitError, ValueError):
    """Requested quantile lies in the censored tail."""


class UnknownModelError(StokitError, LookupError):
    """Model name not present in the builtin catalog."""


class SingularParameterError(StokitError, ValueError):
    """Parameters at which a formula is singular (e.g. zero mean reversion)."""
