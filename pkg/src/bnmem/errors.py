class ShapeError(ValueError):
    """Array shapes or sizes do not fit together."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared where the engine requires finite values."""


class TrainingDiverged(NonFiniteError):
    """Loss became non-finite during training."""

    def __init__(self, message, epoch=None, step=None, model_id=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step
        self.model_id = model_id


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class IdxFormatError(ValueError):
    """Malformed IDX file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
