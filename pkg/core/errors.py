# core/errors.py: exception hierarchy shared by the library and the CLI
from __future__ import annotations

from typing import Optional


class EvhopError(Exception):
    """Base class for every error raised on purpose by this project."""


class ConfigError(EvhopError, ValueError):
    pass


class FormatMismatchError(EvhopError, ValueError):
    pass


class FixedPointDivisionByZero(EvhopError, ZeroDivisionError):
    pass


class FixedPointDomainError(EvhopError, ValueError):
    pass


class AerParseError(EvhopError, ValueError):
    """Malformed event record. `line` is 1-based for CSV, `offset` is a byte offset for BIN."""

    def __init__(self, msg: str, *, line: Optional[int] = None, offset: Optional[int] = None):
        where = []
        if line is not None:
            where.append(f"line={line}")
        if offset is not None:
            where.append(f"offset={offset}")
        super().__init__(f"{msg} ({' '.join(where)})" if where else msg)
        self.line = line
        self.offset = offset


class AerRangeError(AerParseError):
    pass


class BackpressureStall(EvhopError):
    """Both histogram buffers are busy and the collector was told not to drop."""


class EmptyFrame(EvhopError):
    """Histogram without a single non-zero pixel (c == 0)."""


class CorruptStream(EvhopError, ValueError):
    pass
