"""Exception hierarchy. Each family maps to one CLI exit code."""


class SEQError(Exception):
    exit_code = 1


class ConfigError(SEQError):
    exit_code = 2


class DataError(SEQError):
    exit_code = 3


class IdxFormatError(DataError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class DimOverflowError(IdxFormatError):
    pass


class NumericError(SEQError):
    """Non-finite loss or gradient during training.

    ``checkpoint`` holds a copy of the last parameters that produced a finite
    loss, when one exists.
    """

    exit_code = 4

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class PreconditionError(SEQError):
    exit_code = 5


class ShapeError(PreconditionError, ValueError):
    pass
