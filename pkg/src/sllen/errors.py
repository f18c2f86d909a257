"""Exception hierarchy shared by all sllen modules."""


class SllenError(Exception):
    """Base class for every error raised by this package."""


class UnsupportedFormat(SllenError):
    pass


class CorruptImage(SllenError):
    pass


class ShapeMismatch(SllenError, ValueError):
    pass


class ShapeError(SllenError, ValueError):
    pass


class DegenerateShape(ShapeError):
    pass


class LengthMismatch(SllenError, ValueError):
    pass


class InvalidParam(SllenError, ValueError):
    pass


class EmptyDataset(SllenError):
    pass


class PatchLargerThanImage(SllenError, ValueError):
    pass


class ConfigError(SllenError, ValueError):
    pass


class WeightLoadError(SllenError):
    pass


class TokenBudgetExceeded(SllenError):
    pass


class NoReference(SllenError):
    pass


class NonFiniteLoss(SllenError, FloatingPointError):
    """Raised when a loss term turns NaN/Inf; ``term`` names the offender."""

    def __init__(self, term, value, step=None):
        self.term = term
        self.value = value
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss term {term!r} = {value}{where}")


class ImageTooSmall(SllenError, ValueError):
    pass


class LabelOutOfRange(SllenError, ValueError):
    pass
