"""Exception hierarchy shared across the package."""


class MoesimError(Exception):
    """Base class for every error this package raises deliberately."""


class ConfigurationError(MoesimError):
    """Invalid shapes, sizes, or parameter combinations."""


class TraceParseError(MoesimError):
    """Malformed trace or parameter file; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(MoesimError):
    """Well-formed input that violates a domain invariant."""


class NumericError(MoesimError):
    """Non-finite values where finite arithmetic is required."""


class PlacementError(MoesimError):
    """A token was mapped to a slot that is not resident."""


class InfeasibleCapacityError(MoesimError):
    """Capacity too small to give every demanded expert one replica."""

    def __init__(self, message: str, layer: int | None = None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class TrainingError(MoesimError):
    """Predictor training diverged; carries the epoch it happened in."""

    def __init__(self, message: str, epoch: int | None = None):
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)
        self.epoch = epoch


class MetricError(MoesimError):
    """A metric is undefined for the given inputs (e.g. zero makespan)."""


class AggregationError(MoesimError):
    """Metric rows from incompatible configurations were mixed."""
