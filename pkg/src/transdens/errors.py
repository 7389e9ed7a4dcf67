"""Exception types shared across the package."""


class TransdensError(Exception):
    """Base class for all package-specific errors."""


class ModelEvaluationError(TransdensError):
    """A model coefficient or density produced a non-finite value."""


class UnsupportedOrderError(TransdensError):
    """A cumulant or derivative order outside the supported range."""


class CapabilityError(TransdensError):
    """A kernel lacks the derivative order required by an operator."""


class ConditioningError(TransdensError):
    """A covariance matrix is numerically singular."""


class AccuracyError(TransdensError):
    """Quadrature refinement disagreement exceeded the tolerance.

    Carries both estimates so the caller can inspect the disagreement.
    """

    def __init__(self, message, coarse=None, fine=None):
        super().__init__(message)
        self.coarse = coarse
        self.fine = fine


class TruncationError(TransdensError):
    """A series tail bound was not achieved within the term budget."""

    def __init__(self, message, tail_bound=None):
        super().__init__(message)
        self.tail_bound = tail_bound


class ResolutionError(TransdensError):
    """Fourier inversion grid aliasing detected (negative mass)."""


class GridExtentError(TransdensError):
    """Density mass leaked through a spatial grid boundary."""


class ConfigError(TransdensError):
    """Invalid or unknown entries in a model configuration."""
