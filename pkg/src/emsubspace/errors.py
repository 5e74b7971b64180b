"""Exception hierarchy shared by every module."""


class EmSubspaceError(Exception):
    """Base class for all library errors."""


class DataError(EmSubspaceError):
    """Input data is malformed or inconsistent with an operation."""


class MissingDataError(DataError):
    """The operation cannot handle unobserved entries."""


class DimensionError(DataError, ValueError):
    """Shapes or sizes do not agree."""


class NotPsdError(DataError):
    """A matrix expected to be positive semi-definite is not."""


class OutOfBoundsError(DataError):
    """A lookup fell outside a frame under the ``error`` border policy."""


class DegenerateSystemError(DataError):
    """Observation system carries no gradient information."""


class SingularityError(EmSubspaceError):
    """A linear system became numerically singular."""


class ConvergenceError(EmSubspaceError):
    """An iteration hit its cap before meeting its tolerance.

    ``partial`` holds whatever model the routine had built so far so that
    callers can still inspect diagnostics.
    """

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class CollapseError(ConvergenceError):
    """SPCA noise level shrank to the zero-noise limit."""


class PerfectRegistrationError(EmSubspaceError):
    """Motion-compensated error is zero, so IMC is infinite."""

    imc_db = float("inf")
