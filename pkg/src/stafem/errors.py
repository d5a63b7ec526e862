"""Exception hierarchy shared by all modules."""


class StafemError(Exception):
    """Base class for every error raised by the package."""


class InputError(StafemError, ValueError):
    """Malformed arguments: bad tolerances, unrelated meshes, points outside the domain."""


class DataError(StafemError, ValueError):
    """Problem data that violates its contract (non-SPD coefficient, nonfinite values)."""


class NumericError(StafemError, ArithmeticError):
    """A linear solve failed to converge or produced nonfinite output."""


class ResourceError(StafemError, RuntimeError):
    """A step, dof or iteration cap was hit.

    Parameters
    ----------
    message : str
        Human readable reason.
    partial : object, optional
        Whatever partial result the caller accumulated (usually a run log).
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
