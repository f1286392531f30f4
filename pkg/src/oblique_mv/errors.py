"""Exception types shared across the package."""


class ObliqueMVError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ObliqueMVError):
    """Unsupported geometry, bad parameter combination, or invalid config."""


class InfeasibleSetError(ConfigurationError):
    """A constraint set is empty or excludes the origin."""


class CertificateError(ObliqueMVError):
    """An interior certificate does not satisfy its containment claim."""


class SpectralError(ObliqueMVError):
    """A matrix fails a required spectral property (symmetry, positivity)."""


class StepError(ObliqueMVError):
    """A single constrained step failed to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DivergenceError(ObliqueMVError):
    """A simulated state exceeded the blow-up guard."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class BudgetError(ConfigurationError):
    """A nested computation would exceed its configured budget."""


class ReductionError(ObliqueMVError):
    """A time-dependent constraint problem cannot be reduced."""
