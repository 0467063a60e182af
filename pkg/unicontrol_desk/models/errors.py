"""
Errors - Exception hierarchy shared by every UniControl-Desk layer
"""

from typing import Optional


class UniControlError(Exception):
    """Base class for all errors raised by the package."""


class ShapeError(UniControlError, ValueError):
    """Operands of a primitive or operation are not conformable."""

    def __init__(self, primitive: str, *shapes: object, detail: str = "") -> None:
        shown = " vs ".join(str(tuple(s)) if isinstance(s, (tuple, list)) else str(s) for s in shapes)
        message = f"{primitive}: incompatible shapes {shown}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)
        self.primitive = primitive


class NonFiniteError(UniControlError, FloatingPointError):
    """A primitive produced NaN or Inf."""


class GraphError(UniControlError, RuntimeError):
    """Misuse of a recorded graph (non-scalar loss, double backward)."""


class ConfigError(UniControlError, ValueError):
    """Bad configuration key or value."""


class UnknownTaskError(UniControlError, KeyError):
    """A task key that is not registered."""

    def __init__(self, key: str) -> None:
        super().__init__(key)
        self.key = key

    def __str__(self) -> str:
        return f"unknown task: {self.key!r}"


class FormatError(UniControlError, ValueError):
    """A binary file failed validation."""

    def __init__(self, message: str, offset: Optional[int] = None) -> None:
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)
        self.offset = offset


class DatasetError(UniControlError, OSError):
    """Reading or writing dataset files failed."""

    def __init__(self, message: str, path: object) -> None:
        super().__init__(f"{message}: {path}")
        self.path = path
