"""Exception hierarchy shared by every codec module."""


class CodecError(Exception):
    """Base class for all errors raised by the codec."""


class InvalidArgumentError(CodecError, ValueError):
    """An argument violates a documented precondition."""


class MalformedInputError(CodecError):
    """A raw input file does not have the expected layout."""


class MalformedBitstreamError(CodecError):
    """The coded data cannot be parsed.

    ``offset`` is the byte offset (from the start of the buffer being parsed)
    at which the problem was detected, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MalformedWeightsError(CodecError):
    """A network weight file is truncated or carries a bad header."""


class TrainingDivergedError(CodecError):
    """The filter trainer produced a non-finite loss."""


class MissingWeightsError(CodecError):
    """A stream needs filter weights whose hash matches none of the files supplied."""
