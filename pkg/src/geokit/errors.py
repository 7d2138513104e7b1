"""Exception hierarchy.

Two families matter to callers: :class:`DomainError` (bad input or an
inapplicable construction) and :class:`NumericalError` (a computation that
was attempted and failed).  The command line maps them to exit codes 2 and 3.
"""


class GeokitError(Exception):
    """Base class for all toolkit errors."""


class DomainError(GeokitError):
    """Input outside the domain of an operation."""


class MetricError(DomainError):
    """Metric not positive definite, or a metric parameter is invalid."""


class PreconditionError(DomainError):
    """An operation precondition does not hold."""


class NotSimpleError(DomainError):
    """A curve expected to be simple has a self-intersection."""


class ClassificationError(DomainError):
    """A point or orbit does not have the required stability type."""


class FormulaInapplicableError(DomainError):
    """A closed-form expression is not valid for the given data."""


class MainCaseViolationError(DomainError):
    """The perturbation needs f1(T) f1'(T) != 0."""


class AmplitudeError(DomainError):
    """Bump amplitude is not admissible."""


class PatchError(DomainError):
    """A Fermi patch cannot be built with the requested extent."""


class SpecError(GeokitError):
    """Malformed configuration or metric spec file."""

    def __init__(self, message, line=None, field=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field '{field}'")
        prefix = ", ".join(loc)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.line = line
        self.field = field


class NumericalError(GeokitError):
    """A numerical procedure failed."""


class IntegrationError(NumericalError):
    """Step-size underflow or step budget exhausted."""


class NoConvergenceError(NumericalError):
    """Newton iteration did not converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NoReturnError(NumericalError):
    """The flow did not come back to the section before the time cap."""


class GrazingError(NumericalError):
    """The section was crossed nearly tangentially."""


class ConstructionViolationError(NumericalError):
    """A perturbed metric does not keep the designed geodesic."""
