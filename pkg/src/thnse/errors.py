"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid mesh, scheme or experiment parameters."""


class SolverError(RuntimeError):
    """A time step could not be completed."""

    def __init__(self, message, step=None, residuals=()):
        super().__init__(message)
        self.step = step
        self.residuals = list(residuals)
