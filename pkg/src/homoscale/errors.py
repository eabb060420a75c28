"""Exception hierarchy shared by every module."""


class HomoscaleError(Exception):
    """Base class; the CLI maps it to exit code 3."""


class ValidationError(HomoscaleError, ValueError):
    """Input data violates a documented precondition."""


class ResolutionError(ValidationError):
    """A grid or quadrature is too coarse for the data it must represent."""


class SeparationError(ValidationError):
    """A truncation plan was used on scales it marks as not separated."""


class SolverError(HomoscaleError, RuntimeError):
    """An iterative solve failed to reach its tolerance."""

    def __init__(self, message, worst_node=None, residual=None):
        super().__init__(message)
        self.worst_node = worst_node
        self.residual = residual


class ConsistencyError(HomoscaleError, RuntimeError):
    """A computed quantity failed an internal sanity check (e.g. ellipticity)."""
