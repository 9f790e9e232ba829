"""Exception hierarchy shared by all evshare modules."""


class EvShareError(Exception):
    """Base class for every error raised by evshare."""


class InvalidParameterError(EvShareError, ValueError):
    """A parameter set violates a structural requirement."""


class ConfigError(EvShareError, ValueError):
    """A scenario or run configuration could not be parsed or validated."""


class InfeasibleDecisionError(EvShareError):
    """A decision violates a box, balance or coupling constraint."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class InfeasibleProblemError(EvShareError):
    """An optimization problem admits no feasible point."""

    def __init__(self, message, constraint_class=None):
        super().__init__(message)
        self.constraint_class = constraint_class


class NonConvergenceError(EvShareError):
    """An iterative solver hit its iteration cap before meeting its tolerance."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = dict(residuals or {})


class InvariantViolation(EvShareError):
    """A runtime invariant (SOC bounds, balance, antisymmetry) failed during simulation."""

    def __init__(self, message, slot=None):
        super().__init__(message)
        self.slot = slot


class SocViolationError(InvariantViolation):
    """Battery energy left [e_batt_min, e_batt_max]."""


class ControllerError(EvShareError):
    """A controller failed inside the simulation loop."""

    def __init__(self, message, slot=None):
        super().__init__(message)
        self.slot = slot
