"""Exception types shared across the package."""


class CalciflowError(Exception):
    """Base class for package errors."""


class ValidationError(CalciflowError, ValueError):
    """Bad input data: config files, schemas, cross references."""


class DomainError(CalciflowError, ValueError):
    """Physically meaningless argument to a model function."""


class ConvergenceError(CalciflowError, RuntimeError):
    """An iterative solver did not reach its tolerance."""

    def __init__(self, message, residual_norm=None, iterations=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.iterations = iterations


class OvertemperatureError(CalciflowError, RuntimeError):
    """Hot gas generator outlet exceeded its material limit."""


class InfeasibleError(CalciflowError, RuntimeError):
    """Linear program has no feasible point; carries a certificate."""

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = {} if certificate is None else certificate


class UnboundedError(CalciflowError, RuntimeError):
    """Linear program objective is unbounded below; carries a ray."""

    def __init__(self, message, ray=None):
        super().__init__(message)
        self.ray = ray


class StageError(CalciflowError, RuntimeError):
    """A stage of a hierarchical run failed.

    Carries the stage name and whatever partial result was assembled
    before the failure, so callers can still inspect or persist it.
    """

    def __init__(self, stage, message, partial=None):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.partial = partial
