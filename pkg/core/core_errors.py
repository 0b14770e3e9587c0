"""Exception hierarchy shared by every package."""


class PolyVividError(Exception):
    """Base class for all errors raised by this project."""


class NumericsError(PolyVividError):
    """Shape mismatch, non-finite value or invalid gradient request."""


class TrainingDiverged(NumericsError):
    """The training loss became NaN or infinite."""


class TensorFileError(PolyVividError):
    """A TensorFile blob or checkpoint directory could not be read."""


class LayoutError(PolyVividError):
    """Template or token stream is malformed."""


class ConfigError(PolyVividError):
    """Unknown key or out-of-range value in a run configuration."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class ConsolidationError(PolyVividError):
    """Subject graph or observation provider failure."""


class MetricsError(PolyVividError):
    """Invalid inputs to an evaluation metric."""
