"""
Error types for simplexgrad.

Every failure raised by the library derives from SimplexGradError, which is a
ValueError so that callers written against plain argument validation keep working.
The CLI maps ConfigError to exit code 1 and every other SimplexGradError to 2.
"""

from typing import Any, Optional


class SimplexGradError(ValueError):
    """Base class for all library errors."""


# simplex_core
class DimensionTooSmall(SimplexGradError):
    pass


class NegativeMass(SimplexGradError):
    pass


class ZeroTotal(SimplexGradError):
    pass


class InvalidParameter(SimplexGradError):
    """A Dirichlet parameter or another numeric argument is out of range."""


# mixtures
class ZeroEntry(SimplexGradError):
    """The base point has a zero coordinate, so the score multiplier diverges."""


class BadMargin(SimplexGradError):
    pass


class InfeasibleEta(SimplexGradError):
    """A block cannot realize the shared score multiplier with a positive exponent base."""


class WrongKind(SimplexGradError):
    pass


# estimators / objectives
class InvalidC(SimplexGradError):
    pass


class InvalidReplications(SimplexGradError):
    pass


class OracleFailure(SimplexGradError):
    pass


class OffSimplexUnsupported(SimplexGradError):
    pass


class DimensionMismatch(SimplexGradError):
    pass


# subproblems
class Infeasible(SimplexGradError):
    pass


class LPNumericalFailure(SimplexGradError):
    pass


class BisectionFailure(SimplexGradError):
    pass


class NonPositiveIterate(SimplexGradError):
    pass


class SupportViolation(SimplexGradError):
    pass


# optimizers
class BoundaryCollapse(SimplexGradError):
    pass


class FeasibilityViolation(SimplexGradError):
    pass


class RunAborted(SimplexGradError):
    """Wraps an error raised mid-run together with the trace recorded so far."""

    def __init__(self, cause: Exception, trace: Optional[Any] = None):
        super().__init__(f"{type(cause).__name__}: {cause}")
        self.cause = cause
        self.trace = trace


# cli_bench
class ConfigError(SimplexGradError):
    pass


class InsufficientPoints(SimplexGradError):
    """A log-log slope fit needs at least three grid points."""
