"""Exception hierarchy shared by all oar modules."""

from __future__ import annotations


class OARError(Exception):
    """Base class for every error raised by oar."""


class ParseError(OARError, ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class IoError(OARError, OSError):
    pass


class EmptyCloud(OARError, ValueError):
    pass


class DegenerateCloud(OARError, ValueError):
    pass


class KTooLarge(OARError, ValueError):
    pass


class SingularGram(OARError, ArithmeticError):
    pass


class IndexMismatch(OARError, ValueError):
    pass


class SizeMismatch(OARError, ValueError):
    pass


class ShapeMismatch(OARError, ValueError):
    pass


class TOutOfRange(OARError, ValueError):
    pass


class FractionOutOfRange(OARError, ValueError):
    pass


class CheckpointError(OARError, ValueError):
    pass


class NonFiniteLoss(OARError, ArithmeticError):
    """Raised when the objective or its gradient stops being finite.

    ``result`` carries the registration state from the last finite epoch
    so callers can still write partial outputs.
    """

    def __init__(self, epoch: int, result=None):
        self.epoch = epoch
        self.result = result
        super().__init__(f"non-finite loss or gradient at epoch {epoch}")
