"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class FBSDEError(Exception):
    """Base class for all errors raised by :mod:`fbsde`."""


class ConfigurationError(FBSDEError, ValueError):
    """Invalid grid, solver or run configuration."""


class UsageError(FBSDEError, ValueError):
    """An operation was called with incompatible arguments."""


class DomainError(FBSDEError, ValueError):
    """A point lies outside the computational domain."""


class EvaluationError(FBSDEError, ArithmeticError):
    """A user supplied function returned a non-finite value."""


class AssemblyError(FBSDEError, ArithmeticError):
    """Transition-matrix assembly produced a non-finite entry."""


class ModelError(FBSDEError, ValueError):
    """SDE coefficients violate a model requirement (e.g. negative volatility)."""


class DegenerateDataError(FBSDEError, ValueError):
    """Input data cannot support the requested statistic."""


class StepError(FBSDEError, ArithmeticError):
    """A backward step failed; carries the time index when known."""

    def __init__(self, message: str, *, k: int | None = None, t: float | None = None,
                 cell: int | None = None):
        self.k = k
        self.t = t
        self.cell = cell
        super().__init__(message)


class NonConvergenceError(StepError):
    """An inner or outer iteration exhausted its iteration budget."""

    def __init__(self, message: str, *, residual: float = float("nan"), **kw):
        self.residual = residual
        super().__init__(message, **kw)


class SingularJacobianError(StepError):
    """Newton derivative ``1 + dt * g_y`` vanished in some cell."""
