"""Exception types shared across the package."""


class FbdiffError(Exception):
    """Base class for all package-specific errors."""


class FluxHypothesisError(FbdiffError):
    """A flux model violates one of the shape hypotheses of its family.

    Carries the name of the failed clause so callers can report it.
    """

    def __init__(self, clause, message):
        self.clause = clause
        super().__init__(f"[{clause}] {message}")


class DomainError(FbdiffError, ValueError):
    """An argument lies outside the mathematically admissible range."""


class ConstructionError(FbdiffError):
    """A monotone modified flux could not be built under the strict bounds."""

    def __init__(self, message, interval=None):
        self.interval = interval
        super().__init__(message)


class SolverError(FbdiffError):
    """Newton iteration failed inside the implicit parabolic solver."""

    def __init__(self, message, step=None, time=None, residual=None):
        self.step = step
        self.time = time
        self.residual = residual
        super().__init__(message)


class PreconditionError(FbdiffError):
    """An operation's entry hypothesis does not hold for the given data."""


class NotReachedError(FbdiffError):
    """A hitting level was never reached within the integration budget."""

    def __init__(self, message, closest_value=None, closest_time=None):
        self.closest_value = closest_value
        self.closest_time = closest_time
        super().__init__(message)


class EstimationError(FbdiffError):
    """A fit could not be performed (e.g. all norms below the noise floor)."""


class NotASubsolutionError(FbdiffError):
    """A field's Jacobian diagonal leaves the closed branch band."""

    def __init__(self, message, offenders=None):
        # offenders: list of (time-index, space-index) cell coordinates
        self.offenders = offenders or []
        super().__init__(message)


class ResolutionError(FbdiffError):
    """The grid is too coarse for the requested oscillation tolerances."""

    def __init__(self, message, required_nx=None, required_nt=None):
        self.required_nx = required_nx
        self.required_nt = required_nt
        super().__init__(message)


class StepFailureError(FbdiffError):
    """A density step could not meet one of its constraints.

    ``constraint`` names the violated requirement.
    """

    def __init__(self, constraint, message, report=None):
        self.constraint = constraint
        self.report = report
        super().__init__(f"[{constraint}] {message}")


class ConfigError(FbdiffError):
    """A scenario configuration failed to parse or validate."""
