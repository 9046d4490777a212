"""
core/normalizer.py: histogram normalization, float reference and Q24.16/Q16.8 fixed-point path.

  S = sum of all pixels, c = number of non-zero pixels, mean = S / c
  sigma = sqrt( sum over ALL pixels of (F - mean)^2 / c )
  F_norm = (F + 3 sigma) / (6 sigma)

implemented as written (no mean subtraction in F_norm, variance sum includes zero pixels).
The two deviations are opt-in through NormVariant. Degenerate frames (c == 0 or sigma == 0)
map every pixel to 0.5 and carry a flag.

NRM1 dump: "NRM1", u16 width, u16 height, u32 frame_seq, u8 degenerate_flag,
then row-major Q16.8 raws as little-endian i32.
"""
from __future__ import annotations

import enum
import logging
import math
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional

import numpy as np

from core import fixed_point as fx
from core.errors import ConfigError, CorruptStream, EmptyFrame
from core.fixed_point import Q16_8, Q24_16, QAccumulator, QVal
from core.histogram import EventHistogram
from core.utils import fmt_q, log_ctx, read_exact, read_header

logger = logging.getLogger(__name__)

NRM_MAGIC = b"NRM1"
_NRM_HEADER = "<HHIB"


class Degenerate(enum.IntEnum):
    NONE = 0
    EMPTY = 1
    ZERO_SIGMA = 2


@dataclass(frozen=True)
class NormVariant:
    subtract_mean: bool = False
    variance_over_nonzero_only: bool = False

    @classmethod
    def parse(cls, name: str) -> "NormVariant":
        name = (name or "paper").strip().lower()
        if name in ("paper", "literal"):
            return cls()
        if name == "subtract-mean":
            return cls(subtract_mean=True)
        if name == "nz-variance":
            return cls(variance_over_nonzero_only=True)
        raise ConfigError(f"unknown normalization variant {name!r} (paper|subtract-mean|nz-variance)")


LITERAL = NormVariant()


@dataclass
class NormStats:
    S: int
    c: int
    mean: float
    sigma: float
    mean_q: Optional[QVal] = None
    variance_q: Optional[QVal] = None
    sigma_q: Optional[QVal] = None


@dataclass
class NormalizedFrame:
    width: int
    height: int
    pixels: np.ndarray = field(repr=False)  # real values, (height, width)
    stats: Optional[NormStats]
    degenerate_flag: Degenerate = Degenerate.NONE
    frame_seq: int = 0
    raw: Optional[np.ndarray] = field(default=None, repr=False)  # Q16.8 raws (fixed path / loaded)
    saturated: bool = False

    def to_q16_8(self) -> np.ndarray:
        """Q16.8 raws; float-path pixels are rounded half-to-even."""
        if self.raw is not None:
            return self.raw.astype(np.int64)
        raw, _ = fx.saturate_array(np.rint(self.pixels * Q16_8.scale).astype(np.int64), Q16_8)
        return raw


def _grid(h: EventHistogram) -> np.ndarray:
    return h.counts.astype(np.int64)


# ---------- statistics ----------

def compute_stats(h: EventHistogram, variant: NormVariant = LITERAL) -> NormStats:
    """Double-precision statistics. Raises EmptyFrame when no pixel is non-zero."""
    f = _grid(h)
    nz = f != 0
    S = int(f.sum())
    c = int(nz.sum())
    if c == 0:
        raise EmptyFrame(f"frame {h.frame_seq} has no non-zero pixel")
    mean = S / c
    dev = f.astype(np.float64) - mean
    if variant.variance_over_nonzero_only:
        dev = dev[nz]
    sigma = math.sqrt(float(np.sum(dev * dev)) / c)
    return NormStats(S=S, c=c, mean=mean, sigma=sigma)


def compute_stats_fixed(h: EventHistogram, variant: NormVariant = LITERAL) -> NormStats:
    """Same statistics with every intermediate in Q24.16; squares summed in a widened accumulator."""
    f = _grid(h)
    nz = f != 0
    S = int(f.sum())
    c = int(nz.sum())
    if c == 0:
        raise EmptyFrame(f"frame {h.frame_seq} has no non-zero pixel")
    s_q = fx.from_int(S, Q24_16)
    c_q = fx.from_int(c, Q24_16)
    mean_q = fx.q_div(s_q, c_q)

    # group identical pixel values: exact and cheap on small-count histograms
    sample = f[nz] if variant.variance_over_nonzero_only else f
    values, counts = np.unique(sample, return_counts=True)
    acc = QAccumulator(Q24_16)
    for v, n in zip(values.tolist(), counts.tolist()):
        d = fx.q_sub(fx.from_int(v, Q24_16), mean_q)
        acc.add_square_raw(d.raw, n)
    variance_q = acc.mean(c)
    sigma_q = fx.q_sqrt(variance_q)
    if s_q.saturated or variance_q.saturated:
        logger.warning("fixed-point statistics saturated %s", log_ctx(frame_seq=h.frame_seq, S=S, c=c))
    return NormStats(S=S, c=c, mean=mean_q.to_real(), sigma=sigma_q.to_real(),
                     mean_q=mean_q, variance_q=variance_q, sigma_q=sigma_q)


# ---------- normalization ----------

def _degenerate(h: EventHistogram, stats: Optional[NormStats], flag: Degenerate,
                fixed: bool) -> NormalizedFrame:
    logger.info("degenerate frame %s", log_ctx(frame_seq=h.frame_seq, flag=flag.name))
    pixels = np.full((h.height, h.width), 0.5)
    raw = np.full((h.height, h.width), Q16_8.scale // 2, dtype=np.int64) if fixed else None
    return NormalizedFrame(h.width, h.height, pixels, stats, flag, h.frame_seq, raw)


def normalize_float(h: EventHistogram, variant: NormVariant = LITERAL) -> NormalizedFrame:
    try:
        stats = compute_stats(h, variant)
    except EmptyFrame:
        return _degenerate(h, None, Degenerate.EMPTY, fixed=False)
    if stats.sigma == 0.0:
        return _degenerate(h, stats, Degenerate.ZERO_SIGMA, fixed=False)
    f = _grid(h).astype(np.float64)
    if variant.subtract_mean:
        f = f - stats.mean
    pixels = (f + 3.0 * stats.sigma) / (6.0 * stats.sigma)
    return NormalizedFrame(h.width, h.height, pixels, stats, Degenerate.NONE, h.frame_seq)


def normalize_fixed(h: EventHistogram, variant: NormVariant = LITERAL) -> NormalizedFrame:
    """Q24.16 dataflow, Q16.8 output."""
    try:
        stats = compute_stats_fixed(h, variant)
    except EmptyFrame:
        return _degenerate(h, None, Degenerate.EMPTY, fixed=True)
    sigma_q = stats.sigma_q
    if sigma_q.raw < 1:  # below one LSB
        return _degenerate(h, stats, Degenerate.ZERO_SIGMA, fixed=True)

    three_sigma = fx.q_mul(fx.from_int(3, Q24_16), sigma_q)
    six_sigma = fx.q_mul(fx.from_int(6, Q24_16), sigma_q)
    f_raw, sat_in = fx.saturate_array(_grid(h) << Q24_16.frac_bits, Q24_16)
    if variant.subtract_mean:
        f_raw, sat_m = fx.saturate_array(f_raw - stats.mean_q.raw, Q24_16)
        sat_in = sat_in or sat_m
    num, sat_num = fx.saturate_array(f_raw + three_sigma.raw, Q24_16)
    quot, sat_div = fx.q_div_array(num, six_sigma)
    out, sat_out = fx.requantize_array(quot, Q24_16, Q16_8)
    saturated = sat_in or sat_num or sat_div or sat_out
    if saturated:
        logger.warning("normalization saturated %s", log_ctx(frame_seq=h.frame_seq))
    logger.debug("normalized frame %s sigma %s",
                 log_ctx(frame_seq=h.frame_seq, S=stats.S, c=stats.c), fmt_q(sigma_q.raw, 16))
    return NormalizedFrame(h.width, h.height, out / Q16_8.scale, stats, Degenerate.NONE,
                           h.frame_seq, raw=out, saturated=saturated)


def normalize(h: EventHistogram, mode: str = "fixed", variant: NormVariant = LITERAL) -> NormalizedFrame:
    if mode == "fixed":
        return normalize_fixed(h, variant)
    if mode == "float":
        return normalize_float(h, variant)
    raise ConfigError(f"normalization mode must be float|fixed, got {mode!r}")


# ---------- NORM lane timing ----------

def norm_pipeline_cycles(pixel_count: int, lane_latency_cycles: int, lanes: int) -> int:
    """Cycles to stream pixel_count pixels through `lanes` replicated NORM blocks.

    Fill latency, then one result per cycle when lanes cover the block latency;
    with fewer lanes the issue rate drops to lanes / latency results per cycle.
    """
    if lanes < 1 or lane_latency_cycles < 1:
        raise ConfigError("lanes and lane_latency_cycles must be >= 1")
    if pixel_count <= 0:
        return 0
    if lanes >= lane_latency_cycles:
        return lane_latency_cycles + pixel_count - 1
    return lane_latency_cycles + math.ceil(pixel_count * lane_latency_cycles / lanes) - 1


def norm_pipeline_seconds(pixel_count: int, lane_latency_cycles: int, lanes: int, clock_hz: float) -> float:
    return norm_pipeline_cycles(pixel_count, lane_latency_cycles, lanes) / clock_hz


# ---------- NRM1 ----------

def dump_normalized(frame: NormalizedFrame, sink: BinaryIO) -> None:
    sink.write(NRM_MAGIC)
    sink.write(struct.pack(_NRM_HEADER, frame.width, frame.height, frame.frame_seq, int(frame.degenerate_flag)))
    sink.write(frame.to_q16_8().astype("<i4").tobytes(order="C"))


def load_normalized(src: BinaryIO) -> NormalizedFrame:
    width, height, frame_seq, flag = read_header(src, NRM_MAGIC, _NRM_HEADER)
    try:
        flag = Degenerate(flag)
    except ValueError:
        raise CorruptStream(f"unknown degenerate flag {flag}")
    payload = read_exact(src, 4 * width * height, "NRM1 pixels")
    if src.read(1):
        raise CorruptStream("trailing bytes after NRM1 pixels")
    raw = np.frombuffer(payload, dtype="<i4").reshape(height, width).astype(np.int64)
    return NormalizedFrame(width, height, raw / Q16_8.scale, None, flag, frame_seq, raw=raw)
