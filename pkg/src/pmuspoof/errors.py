"""Exception hierarchy shared by all modules."""


class PmuSpoofError(Exception):
    """Base class for every error raised by this package."""


class CaseFormatError(PmuSpoofError):
    """Malformed or inconsistent network case / fixture file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(PmuSpoofError):
    """Invalid experiment configuration."""


class NumericalError(PmuSpoofError):
    """A numerical routine failed (singularity, non-convergence, ...)."""


class ConvergenceError(NumericalError):
    def __init__(self, message, mismatch=None, iterations=None):
        self.mismatch = mismatch
        self.iterations = iterations
        super().__init__(message)


class UnobservableError(NumericalError):
    """The measurement system does not determine the state (singular gain)."""


class DegenerateMeasurementError(NumericalError):
    """A gamma update has no information (A_n^T Sigma^-1 z vanishes)."""


class InternalError(NumericalError):
    """An invariant that theory guarantees was violated."""
