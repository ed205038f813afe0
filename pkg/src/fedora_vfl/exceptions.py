"""Exception hierarchy shared across the package."""


class FedoraError(Exception):
    """Base class for all package errors."""


class ValidationError(FedoraError, ValueError):
    """Input failed a precondition check."""


class DimensionError(ValidationError):
    """Tensor shapes do not compose."""


class AlignmentError(ValidationError):
    """Party id sets have an empty intersection."""


class IngestionError(FedoraError, IOError):
    """A data file could not be read or parsed."""


class ConfigError(ValidationError):
    """Experiment or optimizer configuration is invalid."""


class NumericError(FedoraError, ArithmeticError):
    """A computation produced a non-finite value."""


class DivergenceError(NumericError):
    """Training or unlearning diverged (non-finite loss)."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
