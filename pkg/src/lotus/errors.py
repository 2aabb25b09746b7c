"""Exception hierarchy shared by every module."""


class LotusError(Exception):
    pass


class InputError(LotusError, ValueError):
    """Malformed argument values (out-of-range fractions, bad labels, ...)."""


class DimensionError(InputError):
    pass


class UsageError(LotusError, ValueError):
    """An API was called in a state or combination it does not support."""


class NumericError(LotusError, ArithmeticError):
    pass


class FormatError(LotusError, ValueError):
    """A binary file failed to decode.

    Carries the offending path (if known) and the byte offset where decoding
    stopped, both of which are included in the message.
    """

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts))
