"""Exception hierarchy shared across the package."""


class MienCapError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(MienCapError):
    """An input value violates a documented invariant."""


class DimensionError(ValidationError):
    """Vector/matrix lengths do not line up."""


class FormatError(MienCapError):
    """A file or wire record is malformed or has an unsupported version."""


class DegenerateGeometryError(MienCapError):
    """Landmark configuration is rank-deficient (e.g. all points collinear)."""


class InfiniteDivergenceError(MienCapError):
    """KL divergence is infinite (q_i = 0 where p_i > 0)."""


class TrainingDivergedError(MienCapError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class StreamError(MienCapError):
    """A live stream violated its contract mid-flight (e.g. channel drift)."""
