import math
from fractions import Fraction

import numpy as np
import pytest

from core import fixed_point as fx
from core.errors import FixedPointDivisionByZero, FixedPointDomainError, FormatMismatchError
from core.fixed_point import Q16_8, Q24_16, QAccumulator, QFormat


def q(x, fmt=Q24_16):
    return fx.from_real(x, fmt)


def exact(v):
    return Fraction(v.raw, v.fmt.scale)


# ---------- construction ----------

def test_formats_are_constructible():
    assert str(Q24_16) == "Q24.16"
    assert str(Q16_8) == "Q16.8"
    assert Q24_16.max_raw == 2 ** 40 - 1
    assert Q24_16.min_raw == -(2 ** 40)


@pytest.mark.parametrize("int_bits, frac_bits", [(0, 8), (1, -1), (40, 9)])
def test_invalid_format_rejected(int_bits, frac_bits):
    with pytest.raises(ValueError):
        QFormat(int_bits, frac_bits)


def test_from_real_examples():
    assert q(1.5).raw == 98304
    assert fx.from_real(0.0, Q16_8).raw == 0
    big = q(2 ** 30)
    assert big.raw == Q24_16.max_raw
    assert big.saturated


def test_from_real_nan_and_inf():
    with pytest.raises(FixedPointDomainError):
        q(float("nan"))
    assert q(float("inf")).raw == Q24_16.max_raw
    assert q(float("-inf")).raw == Q24_16.min_raw


def test_from_real_rounds_half_to_even():
    # 2^-17 is half an LSB of Q24.16
    assert q(Fraction(1, 2 ** 17)).raw == 0
    assert q(Fraction(3, 2 ** 17)).raw == 2


def test_roundtrip_within_one_lsb():
    rng = np.random.default_rng(1)
    for x in rng.uniform(-1e6, 1e6, size=2000):
        assert abs(q(float(x)).to_real() - x) <= 2 ** -16


def test_saturation_is_monotone():
    rng = np.random.default_rng(2)
    xs = np.sort(rng.uniform(-3e7, 3e7, size=500))
    raws = [q(float(x)).raw for x in xs]
    assert raws == sorted(raws)


# ---------- arithmetic ----------

def test_mul_examples():
    assert fx.q_mul(q(2.0), q(3.0)).to_real() == 6.0
    half = fx.from_real(0.5, Q16_8)
    assert fx.q_mul(half, half).to_real() == 0.25


def test_add_saturates():
    top = fx.from_raw(Q24_16.max_raw, Q24_16)
    r = fx.q_add(top, q(1.0))
    assert r.raw == Q24_16.max_raw
    assert r.saturated


def test_format_mismatch():
    with pytest.raises(FormatMismatchError):
        fx.q_add(q(1.0), fx.from_real(1.0, Q16_8))
    with pytest.raises(FormatMismatchError):
        _ = q(1.0) < fx.from_real(1.0, Q16_8)


def test_div_examples():
    assert fx.q_div(q(12.0), q(3.0)).to_real() == 4.0
    third = fx.q_div(q(1.0), q(3.0))
    assert third.raw == round(Fraction(2 ** 16, 3))
    with pytest.raises(FixedPointDivisionByZero):
        fx.q_div(q(1.0), q(0.0))
    with pytest.raises(ZeroDivisionError):
        fx.q_div(q(1.0), q(0.0))


def test_sqrt_examples():
    assert fx.q_sqrt(q(4.0)).to_real() == 2.0
    assert fx.q_sqrt(q(0.0)).raw == 0
    r = fx.q_sqrt(q(2.0))
    assert abs(r.to_real() - math.sqrt(2.0)) <= 2 ** -16
    assert math.isqrt(2 * 2 ** 32) in (r.raw, r.raw - 1)
    with pytest.raises(FixedPointDomainError):
        fx.q_sqrt(q(-1.0))


def test_add_is_exact_when_not_saturating():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        a, b = (fx.from_raw(int(v), Q24_16) for v in rng.integers(-2 ** 38, 2 ** 38, size=2))
        r = fx.q_add(a, b)
        assert not r.saturated
        assert exact(r) == exact(a) + exact(b)


def test_mul_div_sqrt_within_one_ulp():
    rng = np.random.default_rng(4)
    ulp = Fraction(1, 2 ** 16)
    for _ in range(1000):
        a = fx.from_raw(int(rng.integers(-2 ** 26, 2 ** 26)), Q24_16)
        b = fx.from_raw(int(rng.integers(2 ** 16, 2 ** 26)), Q24_16)
        assert abs(exact(fx.q_mul(a, b)) - exact(a) * exact(b)) <= ulp
        assert abs(exact(fx.q_div(a, b)) - exact(a) / exact(b)) <= ulp
        s = fx.q_sqrt(b)
        assert abs(s.to_real() - math.sqrt(b.to_real())) <= 2 ** -16


def test_requantize_to_output_format():
    v = fx.requantize(q(0.5), Q16_8)
    assert v.raw == 128
    assert v.fmt == Q16_8
    # 0.5 + 2^-9 sits exactly between two Q16.8 steps: ties go to even
    assert fx.requantize(q(Fraction(257, 512)), Q16_8).raw == 128


@pytest.mark.parametrize("v, shift, want", [(3, 1, 2), (1, 1, 0), (5, 1, 2), (-3, 1, -2), (-1, 1, 0), (7, 2, 2)])
def test_rne_shift_ties(v, shift, want):
    assert fx.rne_shift(v, shift) == want


def test_array_helpers_match_scalar_rules():
    rng = np.random.default_rng(5)
    a = rng.integers(-2 ** 40, 2 ** 40, size=5000)
    got = fx.rne_shift_array(a, 8)
    assert got.tolist() == [fx.rne_shift(int(v), 8) for v in a]
    got = fx.rne_div_array(a, 37)
    assert got.tolist() == [fx.rne_div(int(v), 37) for v in a]


def test_q_div_array_matches_scalar():
    rng = np.random.default_rng(6)
    den = q(7.25)
    num = rng.integers(0, 300 << 16, size=200)
    raws, sat = fx.q_div_array(num, den)
    assert not sat
    assert raws.tolist() == [fx.q_div(fx.from_raw(int(v), Q24_16), den).raw for v in num]


def test_accumulator_mean_rounds_once():
    acc = QAccumulator(Q24_16)
    for v in (1.0, 2.0, 3.0):
        acc.add_square_raw(q(v).raw)
    assert acc.mean(3).raw == round(Fraction(14 * 2 ** 16, 3))
    acc.add_square_raw(q(2.0).raw, times=2)
    assert acc.mean(1).to_real() == 22.0
    assert acc.mean(5).raw == round(Fraction(22 * 2 ** 16, 5))
    with pytest.raises(FixedPointDivisionByZero):
        acc.mean(0)


def test_qval_operators():
    a, b = q(1.5), q(0.5)
    assert (a + b).to_real() == 2.0
    assert (a - b).to_real() == 1.0
    assert (a * b).to_real() == 0.75
    assert (a / b).to_real() == 3.0
    assert (-a).to_real() == -1.5
    assert b < a and a >= b
