"""Exception hierarchy shared across the package."""


class SttMpcError(Exception):
    """Base class for all package errors."""


class CapacityError(SttMpcError):
    """Raised when a vertex enumeration would exceed the configured cap."""


class IterationLimitError(SttMpcError):
    """Raised when an iterative set computation does not converge."""


class NotContractibleError(SttMpcError):
    """Raised when a vertex dynamics matrix has spectral radius >= lambda."""


class TemplateUnboundedError(SttMpcError):
    """Raised when a template matrix does not describe a compact set."""


class TemplateInsufficientError(SttMpcError):
    """Raised when a target row lies outside the cone spanned by the template."""


class InstabilityError(SttMpcError):
    """Raised when a Lyapunov equation is posed for a non-Schur matrix."""


class ScheduleNotActiveError(SttMpcError):
    """Raised when the confidence radius is queried before the warm-up ends."""


class BrokenPreconditionError(SttMpcError):
    """Raised when no stored estimate yields a feasible tube MPC problem."""


class CouplingViolationError(SttMpcError):
    """Raised when two logs compared for regret saw different disturbances."""


class ConfigError(SttMpcError):
    """Raised for malformed or invalid experiment configurations.

    ``errors`` holds the human-readable messages collected during validation.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
