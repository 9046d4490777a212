# core/utils.py
from __future__ import annotations

import struct
from typing import BinaryIO, Tuple

from core.errors import CorruptStream


def log_ctx(**kwargs) -> str:
    parts = []
    for k, v in kwargs.items():
        if v is not None and v != "":
            parts.append(f"{k}={v}")
    return " ".join(parts)


def fmt_q(raw: int, frac_bits: int) -> str:
    """Render a fixed-point raw as 'raw=<int> real=<value>' for diffable logs."""
    return f"raw={int(raw)} real={int(raw) / (1 << frac_bits):.8f}"


def read_exact(src: BinaryIO, n: int, what: str) -> bytes:
    buf = src.read(n)
    if buf is None or len(buf) != n:
        got = 0 if not buf else len(buf)
        raise CorruptStream(f"truncated {what}: wanted {n} bytes, got {got}")
    return buf


def read_header(src: BinaryIO, magic: bytes, fmt: str) -> Tuple:
    """Check a 4-byte magic then unpack a little-endian struct header."""
    got = read_exact(src, 4, "magic")
    if got != magic:
        raise CorruptStream(f"bad magic: expected {magic!r}, got {got!r}")
    size = struct.calcsize(fmt)
    return struct.unpack(fmt, read_exact(src, size, f"{magic.decode()} header"))
