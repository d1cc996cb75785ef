"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class SRViTError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SRViTError, ValueError):
    """Invalid shapes, dimensions, keys or options."""


class DataError(SRViTError, ValueError):
    """Input data violates a value contract (non-finite, out of range, ...)."""


class FormatError(DataError):
    """A file could not be decoded.

    ``offset`` is the byte position at which decoding failed.
    """

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class NumericalError(SRViTError, ArithmeticError):
    """Non-finite values appeared during a computation.

    ``tensor`` names the offending tensor when known.
    """

    def __init__(self, message, tensor=None):
        self.tensor = tensor
        if tensor is not None:
            message = f"{message} [{tensor}]"
        super().__init__(message)
