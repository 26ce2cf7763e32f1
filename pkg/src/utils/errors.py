"""
Error hierarchy for the homogenization toolkit.

Every error carries the process exit code the CLI reports for it:
1 for numerical failures, 2 for configuration and I/O failures.
"""
from typing import Any, Optional


class HomogenizationError(Exception):
    """Base class of all toolkit errors."""
    exit_code = 1


# Configuration / I-O

class ConfigError(HomogenizationError):
    exit_code = 2


class InputFileError(HomogenizationError):
    exit_code = 2


# Geometry

class GeometryError(HomogenizationError):
    pass


class InvalidParameter(GeometryError):
    pass


class ObstacleTouchesBoundary(GeometryError):
    pass


class EmptyObstacle(GeometryError):
    pass


class EmptyFluid(GeometryError):
    pass


class ResolutionTooCoarse(GeometryError):
    pass


class IncompatibleTiling(GeometryError):
    pass


class OnCellBoundary(GeometryError):
    pass


# Numerics

class NumericalError(HomogenizationError):
    pass


class SingularProblem(NumericalError):
    pass


class NoConvergence(NumericalError):
    """Raised when a Krylov solve misses its tolerance.

    The best iterate and the solve statistics travel with the error so callers
    can inspect them; the iterate is flagged invalid by construction.
    """

    def __init__(self, message: str, stats: Any = None, best: Optional[Any] = None):
        super().__init__(message)
        self.stats = stats
        self.best = best
        self.valid = False


class NotPositiveDefinite(NumericalError):
    pass


class InvariantViolation(NumericalError):
    def __init__(self, check: str, residual: float, message: str = ""):
        super().__init__(message or f"invariant '{check}' violated (residual {residual:.3e})")
        self.check = check
        self.residual = residual


class InconsistentInputs(NumericalError):
    pass


class IncompatibleInputs(NumericalError):
    pass


class GeometryMismatch(NumericalError):
    pass


class InsufficientRuns(NumericalError):
    pass


def format_error(error: BaseException) -> str:
    """Single-line, machine-parseable rendering used on stderr."""
    text = " ".join(str(error).split())
    return f"error[{type(error).__name__}]: {text}"
