class LabError(Exception):
    """Base class for every error raised by the lab."""


class ConfigurationError(LabError, ValueError):
    """A configuration value violates an invariant."""


class ArgumentError(LabError, ValueError):
    """An operation received arguments outside its domain."""


class NumericError(LabError, ArithmeticError):
    """A non-finite value appeared during a computation."""

    def __init__(self, message: str, layer: int | None = None, branch: str | None = None):
        super().__init__(message)
        self.layer = layer
        self.branch = branch


class GenerationError(LabError):
    """Random generation could not satisfy its constraints."""


class TrainingError(LabError):
    """Training diverged."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class RegimeError(LabError):
    """The experiment regime does not satisfy the separation the analysis needs."""
