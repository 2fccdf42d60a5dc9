"""Exception hierarchy shared by every ccm module."""

from __future__ import annotations


class CCMError(Exception):
    """Base class for all structured errors raised by ccm."""


class ShapeError(CCMError, ValueError):
    """A kernel received operands whose shapes do not conform."""

    def __init__(self, kernel: str, *shapes, detail: str = ""):
        self.kernel = kernel
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " and ".join(str(s) for s in self.shapes)
        msg = f"{kernel}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(CCMError, ValueError):
    """A value lies outside the mathematical domain of an operation."""

    def __init__(self, kernel: str, detail: str):
        self.kernel = kernel
        super().__init__(f"{kernel}: {detail}")


class ConfigError(CCMError, ValueError):
    """Invalid configuration or dataset specification.

    ``field`` names the offending key when one can be singled out.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class QueueError(CCMError, ValueError):
    """Misuse of the knowledge queue (wrong width, oversize batch, cold reads)."""


class FormatError(CCMError, ValueError):
    """A checkpoint or dataset file is malformed or does not match its request."""
