"""Exception hierarchy shared by every module."""


class MelMaskError(Exception):
    """Base class for all engine errors."""


class InvalidConfigError(MelMaskError, ValueError):
    pass


class InvalidInputError(MelMaskError, ValueError):
    pass


class FormatError(MelMaskError, ValueError):
    """Malformed or unsupported file contents."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedRateError(FormatError):
    pass


class StateError(MelMaskError, RuntimeError):
    pass


class NumericError(MelMaskError, ArithmeticError):
    pass


class TrainingError(NumericError):
    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)
        self.step = step
