"""Exception hierarchy shared by every module."""


class InfluxError(Exception):
    """Base class for all errors raised by this package."""


class DataFormatError(InfluxError, ValueError):
    """A dataset or artifact file could not be parsed."""


class DimensionError(InfluxError, ValueError):
    """Array shapes do not agree with the model specification."""


class ConvergenceError(InfluxError, RuntimeError):
    """Training did not reach the requested gradient tolerance."""

    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm


class CapExceededError(InfluxError, ValueError):
    """A dense P x P quantity was requested above the configured cap."""


class StaleCacheError(InfluxError, ValueError):
    """An artifact was produced under different parameters than requested."""


class SolverError(InfluxError, RuntimeError):
    """An inverse-curvature solve failed."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NotPositiveDefiniteError(SolverError):
    """The damped curvature operator is not positive definite."""


class LissaDivergenceError(SolverError):
    """The LiSSA recurrence diverged."""


class ConfigError(InfluxError, ValueError):
    """A run configuration failed validation."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class NumericalError(InfluxError, FloatingPointError):
    """Non-finite intermediate values (e.g. logits)."""
