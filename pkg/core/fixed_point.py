"""
core/fixed_point.py: parameterized Qn.m fixed-point arithmetic.
- Provides: QFormat, QVal, Q24_16, Q16_8, from_real/from_raw/from_int, q_add/q_sub/q_mul/q_div/q_sqrt,
  requantize, QAccumulator, and int64 array helpers with the same rounding rules.
- Rounding is round-to-nearest-even everywhere; overflow saturates and sets `QVal.saturated`.

Qn.m: n integer bits, m fractional bits, plus one sign bit when signed. value = raw / 2^m.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Tuple, Union

import numpy as np

from core.errors import (
    FixedPointDivisionByZero,
    FixedPointDomainError,
    FormatMismatchError,
)

__all__ = [
    "QFormat", "QVal", "Q24_16", "Q16_8",
    "from_real", "from_raw", "from_int", "to_real",
    "q_add", "q_sub", "q_neg", "q_mul", "q_div", "q_sqrt", "requantize",
    "rne_shift", "rne_div", "QAccumulator",
    "saturate_array", "rne_shift_array", "rne_div_array", "q_div_array", "requantize_array",
]

Real = Union[int, float, Fraction]


@dataclass(frozen=True)
class QFormat:
    int_bits: int
    frac_bits: int
    signed: bool = True

    def __post_init__(self) -> None:
        if self.int_bits < 1 or self.frac_bits < 0 or self.int_bits + self.frac_bits > 48:
            raise ValueError(f"invalid Q format Q{self.int_bits}.{self.frac_bits}")

    @property
    def scale(self) -> int:  # 2^m
        return 1 << self.frac_bits

    @property
    def max_raw(self) -> int:
        return (1 << (self.int_bits + self.frac_bits)) - 1

    @property
    def min_raw(self) -> int:
        return -(1 << (self.int_bits + self.frac_bits)) if self.signed else 0

    @property
    def resolution(self) -> float:
        return 1.0 / self.scale

    def __str__(self) -> str:
        return f"{'' if self.signed else 'U'}Q{self.int_bits}.{self.frac_bits}"


Q24_16 = QFormat(24, 16)
Q16_8 = QFormat(16, 8)


def _saturate(raw: int, fmt: QFormat) -> Tuple[int, bool]:
    if raw > fmt.max_raw:
        return fmt.max_raw, True
    if raw < fmt.min_raw:
        return fmt.min_raw, True
    return raw, False


@dataclass(frozen=True)
class QVal:
    raw: int
    fmt: QFormat
    saturated: bool = field(default=False, compare=False)

    def to_real(self) -> float:
        return self.raw / self.fmt.scale

    def __float__(self) -> float:
        return self.to_real()

    def __repr__(self) -> str:
        flag = ", saturated" if self.saturated else ""
        return f"QVal({self.to_real()!r} {self.fmt} raw={self.raw}{flag})"

    # ordering only makes sense inside one format
    def _cmp_raw(self, other: "QVal") -> int:
        _check_same(self, other)
        return self.raw

    def __lt__(self, other: "QVal") -> bool:
        return self._cmp_raw(other) < other.raw

    def __le__(self, other: "QVal") -> bool:
        return self._cmp_raw(other) <= other.raw

    def __gt__(self, other: "QVal") -> bool:
        return self._cmp_raw(other) > other.raw

    def __ge__(self, other: "QVal") -> bool:
        return self._cmp_raw(other) >= other.raw

    def __add__(self, other: "QVal") -> "QVal":
        return q_add(self, other)

    def __sub__(self, other: "QVal") -> "QVal":
        return q_sub(self, other)

    def __mul__(self, other: "QVal") -> "QVal":
        return q_mul(self, other)

    def __truediv__(self, other: "QVal") -> "QVal":
        return q_div(self, other)

    def __neg__(self) -> "QVal":
        return q_neg(self)


def _check_same(a: QVal, b: QVal) -> None:
    if a.fmt != b.fmt:
        raise FormatMismatchError(f"operands in {a.fmt} and {b.fmt}")


# ---------- rounding primitives (exact integers) ----------

def rne_shift(v: int, shift: int) -> int:
    """v / 2^shift rounded to nearest, ties to even. Negative shift scales up exactly."""
    if shift <= 0:
        return v << -shift
    q = v >> shift  # floor, also for negatives
    r = v - (q << shift)
    half = 1 << (shift - 1)
    if r > half or (r == half and q & 1):
        q += 1
    return q


def rne_div(n: int, d: int) -> int:
    """n / d rounded to nearest, ties to even."""
    if d == 0:
        raise FixedPointDivisionByZero("division by zero")
    if d < 0:
        n, d = -n, -d
    q, r = divmod(n, d)  # floor quotient, 0 <= r < d
    twice = 2 * r
    if twice > d or (twice == d and q & 1):
        q += 1
    return q


# ---------- construction ----------

def from_raw(raw: int, fmt: QFormat) -> QVal:
    raw, sat = _saturate(int(raw), fmt)
    return QVal(raw, fmt, sat)


def from_int(n: int, fmt: QFormat) -> QVal:
    return from_raw(int(n) << fmt.frac_bits, fmt)


def from_real(x: Real, fmt: QFormat) -> QVal:
    if isinstance(x, float):
        if math.isnan(x):
            raise FixedPointDomainError("cannot represent NaN")
        if math.isinf(x):
            return QVal(fmt.max_raw if x > 0 else fmt.min_raw, fmt, True)
    scaled = Fraction(x) * fmt.scale
    return from_raw(round(scaled), fmt)  # Fraction.__round__ is half-to-even


def to_real(v: QVal) -> float:
    return v.to_real()


def requantize(v: QVal, fmt: QFormat) -> QVal:
    """Move v into another format (e.g. Q24.16 -> Q16.8) with one RNE rounding."""
    raw = rne_shift(v.raw, v.fmt.frac_bits - fmt.frac_bits)
    out = from_raw(raw, fmt)
    if v.saturated and not out.saturated:
        return QVal(out.raw, fmt, True)
    return out


# ---------- arithmetic ----------

def q_add(a: QVal, b: QVal) -> QVal:
    _check_same(a, b)
    return from_raw(a.raw + b.raw, a.fmt)


def q_sub(a: QVal, b: QVal) -> QVal:
    _check_same(a, b)
    return from_raw(a.raw - b.raw, a.fmt)


def q_neg(a: QVal) -> QVal:
    return from_raw(-a.raw, a.fmt)


def q_mul(a: QVal, b: QVal) -> QVal:
    _check_same(a, b)
    return from_raw(rne_shift(a.raw * b.raw, a.fmt.frac_bits), a.fmt)


def q_div(num: QVal, den: QVal) -> QVal:
    _check_same(num, den)
    if den.raw == 0:
        raise FixedPointDivisionByZero(f"q_div by zero in {num.fmt}")
    return from_raw(rne_div(num.raw << num.fmt.frac_bits, den.raw), num.fmt)


def _isqrt_restoring(n: int) -> Tuple[int, int]:
    """Digit-by-digit (restoring) integer square root. Returns (floor(sqrt(n)), n - root^2)."""
    root = 0
    rem = n
    bit = 1 << ((n.bit_length() - 1) & ~1) if n > 0 else 0  # highest power of four <= n
    while bit:
        trial = root + bit
        if rem >= trial:
            rem -= trial
            root = (root >> 1) + bit
        else:
            root >>= 1
        bit >>= 2
    return root, rem


def q_sqrt(x: QVal) -> QVal:
    if x.raw < 0:
        raise FixedPointDomainError(f"sqrt of negative value {x.to_real()}")
    # sqrt(raw / 2^m) * 2^m == sqrt(raw * 2^m)
    root, rem = _isqrt_restoring(x.raw << x.fmt.frac_bits)
    if rem > root:
        root += 1
    return from_raw(root, x.fmt)


class QAccumulator:
    """Widened sum of products kept at 2m fractional bits; rounded once when read back."""

    def __init__(self, fmt: QFormat):
        self.fmt = fmt
        self.acc = 0

    def add_square_raw(self, raw: int, times: int = 1) -> None:
        """Add `times` copies of (raw / 2^m)^2, raw being in this accumulator's format."""
        self.acc += times * raw * raw

    def mean(self, count: int) -> QVal:
        """acc / count narrowed to the accumulator format with a single rounding."""
        if count == 0:
            raise FixedPointDivisionByZero("mean over zero samples")
        return from_raw(rne_div(self.acc, count << self.fmt.frac_bits), self.fmt)


# ---------- int64 array helpers ----------

_SAFE_BITS = 62


def saturate_array(raw: np.ndarray, fmt: QFormat) -> Tuple[np.ndarray, bool]:
    out = np.clip(raw, fmt.min_raw, fmt.max_raw)
    return out, bool(np.any(out != raw))


def rne_shift_array(a: np.ndarray, shift: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    if shift <= 0:
        return a << -shift
    q = a >> shift
    r = a & ((1 << shift) - 1)
    half = 1 << (shift - 1)
    up = (r > half) | ((r == half) & ((q & 1) == 1))
    return q + up.astype(np.int64)


def rne_div_array(n: np.ndarray, d: int) -> np.ndarray:
    if d == 0:
        raise FixedPointDivisionByZero("array division by zero")
    n = np.asarray(n, dtype=np.int64)
    if d < 0:
        n, d = -n, -d
    q, r = np.divmod(n, d)
    twice = 2 * r
    up = (twice > d) | ((twice == d) & ((q & 1) == 1))
    return q + up.astype(np.int64)


def q_div_array(num_raw: np.ndarray, den: QVal) -> Tuple[np.ndarray, bool]:
    """Element-wise num / den for raws already in den's format. Returns (raws, any_saturated)."""
    num_raw = np.asarray(num_raw, dtype=np.int64)
    m = den.fmt.frac_bits
    if num_raw.size and int(np.abs(num_raw).max()).bit_length() + m > _SAFE_BITS:
        # fall back to exact Python integers; same rounding
        flat = [from_raw(rne_div(int(v) << m, den.raw), den.fmt) for v in num_raw.ravel()]
        out = np.array([v.raw for v in flat], dtype=np.int64).reshape(num_raw.shape)
        return out, any(v.saturated for v in flat)
    return saturate_array(rne_div_array(num_raw << m, den.raw), den.fmt)


def requantize_array(raw: np.ndarray, src: QFormat, dst: QFormat) -> Tuple[np.ndarray, bool]:
    return saturate_array(rne_shift_array(raw, src.frac_bits - dst.frac_bits), dst)
