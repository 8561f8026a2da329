"""Exception types shared across the package."""


class MomentisError(Exception):
    """Base class for all package-specific errors."""


class InvalidInput(MomentisError, ValueError):
    """Malformed or inconsistent arguments (shape mismatch, non-finite data, ...)."""


class NotPositiveDefinite(MomentisError):
    """A matrix required to be positive definite failed factorization."""

    def __init__(self, message, failed_block=None):
        super().__init__(message)
        self.failed_block = failed_block


class Diverged(MomentisError):
    """An iterative routine hit its iteration cap. Carries the last iterate."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class DegenerateSample(MomentisError):
    """Every importance weight vanished (all log-weights are -inf)."""


class InsufficientTail(MomentisError):
    """Too few threshold exceedances to fit a tail distribution."""


class ConstantChain(MomentisError):
    """Autocorrelations are undefined because the chain has zero variance."""
