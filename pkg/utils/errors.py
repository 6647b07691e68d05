"""
Exception hierarchy for the solver.

Every error raised on purpose by the numerical services derives from
SolverError so the CLI can map it to an exit code and a machine-readable
error line.
"""


class SolverError(Exception):
    """Base class for all solver errors."""


class ConfigError(SolverError, ValueError):
    """Missing or invalid run-configuration key."""


class DimensionMismatch(SolverError, ValueError):
    """An evaluator returned an array whose shape contradicts the declared dimensions."""


class EvaluatorFailure(SolverError, RuntimeError):
    """A user-supplied evaluator raised while being checked at build time."""


class EmptySet(SolverError, ValueError):
    """A half-space control set has no feasible point."""


class MissingPartial(SolverError, LookupError):
    """A partial derivative required by the Hamiltonian calculus was not supplied."""


class SingularRegression(SolverError, ArithmeticError):
    """The normal system of a regression is numerically singular."""


class DegenerateDensity(SolverError, ArithmeticError):
    """The density weights at a step are too degenerate to condition on."""

    def __init__(self, message: str, fraction: float):
        super().__init__(message)
        self.fraction = fraction


class NonFinite(SolverError, FloatingPointError):
    """A simulated quantity became NaN or infinite."""

    def __init__(self, quantity: str, path: int, step: int):
        super().__init__(f"{quantity} is not finite on path {path} at step {step}")
        self.quantity = quantity
        self.path = path
        self.step = step


class IoError(SolverError, OSError):
    """A report file could not be written."""
