"""Exception types shared across the package."""


class DPFilterError(Exception):
    """Base class for all package errors."""


class ValidationError(DPFilterError):
    """Bad input: malformed config, inconsistent shapes, broken invariants."""


class SizingError(DPFilterError):
    """A configured size cap (grid sites, Hilbert dimension) was exceeded."""


class NumericalError(DPFilterError):
    """A numerical procedure failed to converge to its stated tolerance."""


class StepSizeError(DPFilterError):
    """An integrator detected instability attributable to the step size."""


class ReplayError(ValidationError):
    """A measurement record cannot be replayed against this configuration."""
