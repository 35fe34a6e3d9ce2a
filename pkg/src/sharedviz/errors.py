"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor or vector dimensions do not line up."""


class FormatError(ValueError):
    """A file on disk does not follow its declared format."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class UnsupportedMaxvalError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class DegenerateError(ValueError):
    """A weighted activation vector has zero norm."""


class TrainingDivergedError(FloatingPointError):
    pass


class BoundViolationError(AssertionError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
