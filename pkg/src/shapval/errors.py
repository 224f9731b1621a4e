"""Exception hierarchy shared across the package."""


class ShapvalError(Exception):
    """Base class for all errors raised by this package."""


class DatasetFormatError(ShapvalError):
    """Manifest or blob files are missing, malformed, or inconsistent."""


class InvariantError(ShapvalError):
    """A documented data invariant was violated."""


class SplitError(ShapvalError):
    """Index sets overlap, run out of bounds, or are too small for a request."""


class TrainingDivergedError(ShapvalError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training loss became non-finite at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class NonDifferentiableModelError(ShapvalError):
    """Operation requires input gradients the model kind cannot provide."""


class UndefinedCorrelationError(ShapvalError):
    """Correlation is undefined (zero variance or too few points)."""


class ConfigError(ShapvalError):
    """Run configuration is unreadable or inconsistent."""
