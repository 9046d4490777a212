"""
core/sparsity.py: sparsity-map (SM) + non-zero value list (NZVL) tensor compression.
- Provides: FeatureMapTensor, CompressedFeatureMap, encode(), decode(), iter_nonzero(),
  nonzero_coordinates(), compressed_size_bits(), compression_ratio(),
  dump_compressed()/load_compressed() (CFM1), dump_dense()/load_dense() (DNS1)

Traversal order is channel-major, then row-major; SM bit i (LSB-first in 32-bit words)
marks value i of that traversal. Values are Q16.8 raws held in 32-bit containers.

CFM1: "CFM1", u16 h, u16 w, u16 ch, u16 reserved, u32 nzvl_count, SM words (<u4), NZVL (<i4).
DNS1: "DNS1", u16 h, u16 w, u16 ch, u16 reserved, then h*w*ch raws (<i4) in traversal order.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Tuple

import numpy as np

from core.errors import ConfigError, CorruptStream
from core.fixed_point import Q16_8
from core.utils import log_ctx, read_exact, read_header

logger = logging.getLogger(__name__)

CFM_MAGIC = b"CFM1"
DNS_MAGIC = b"DNS1"
_CFM_HEADER = "<HHHHI"
_DNS_HEADER = "<HHHH"
WORD_BITS = 32
VALUE_BITS = 32


@dataclass
class FeatureMapTensor:
    values: np.ndarray = field(repr=False)  # (channels, height, width) Q16.8 raws

    def __post_init__(self) -> None:
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[np.newaxis]
        if v.ndim != 3 or min(v.shape) < 1:
            raise ConfigError(f"feature map must be (ch, h, w) with all dims >= 1, got {v.shape}")
        self.values = v.astype(np.int64)

    @classmethod
    def from_real(cls, values) -> "FeatureMapTensor":
        return cls(np.rint(np.asarray(values, dtype=np.float64) * Q16_8.scale).astype(np.int64))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.height, self.width, self.channels

    def to_real(self) -> np.ndarray:
        return self.values / Q16_8.scale

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureMapTensor):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(np.array_equal(self.values, other.values))


@dataclass(frozen=True)
class CompressedFeatureMap:
    dims: Tuple[int, int, int]  # (h, w, ch)
    sm: np.ndarray = field(repr=False, compare=False)  # uint32 words
    nzvl: np.ndarray = field(repr=False, compare=False)  # int32 raws

    def __post_init__(self) -> None:
        sm = np.array(self.sm, dtype=np.uint32, copy=True)
        nzvl = np.array(self.nzvl, dtype=np.int32, copy=True)
        sm.flags.writeable = False
        nzvl.flags.writeable = False
        object.__setattr__(self, "sm", sm)
        object.__setattr__(self, "nzvl", nzvl)

    @property
    def size(self) -> int:
        h, w, ch = self.dims
        return h * w * ch

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CompressedFeatureMap):
            return NotImplemented
        return (self.dims == other.dims and np.array_equal(self.sm, other.sm)
                and np.array_equal(self.nzvl, other.nzvl))


def _words_for(nbits: int) -> int:
    return (nbits + WORD_BITS - 1) // WORD_BITS


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    packed = np.packbits(bits.astype(np.uint8), bitorder="little")
    pad = (-packed.size) % 4
    if pad:
        packed = np.concatenate([packed, np.zeros(pad, dtype=np.uint8)])
    return packed.view("<u4").astype(np.uint32)


def _unpack_bits(c: CompressedFeatureMap) -> np.ndarray:
    n = c.size
    if c.sm.size != _words_for(n):
        raise CorruptStream(f"sparsity map has {c.sm.size} words, expected {_words_for(n)}")
    bits = np.unpackbits(c.sm.astype("<u4").view(np.uint8), bitorder="little").astype(bool)
    if bits[n:].any():
        raise CorruptStream("sparsity map has bits set beyond the tensor size")
    return bits[:n]


def _check(c: CompressedFeatureMap, bits: np.ndarray, lenient: bool) -> None:
    nnz = int(bits.sum())
    if nnz != c.nzvl.size:
        raise CorruptStream(f"popcount(sm)={nnz} but nzvl has {c.nzvl.size} entries")
    if not lenient and c.nzvl.size and not np.all(c.nzvl != 0):
        raise CorruptStream("zero value in non-zero value list")


# ---------- codec ----------

def encode(t: FeatureMapTensor) -> CompressedFeatureMap:
    flat = t.values.ravel()  # (ch, h, w) C-order is the traversal order
    bits = flat != 0
    lo, hi = Q16_8.min_raw, Q16_8.max_raw
    if flat.size and (flat.min() < lo or flat.max() > hi):
        raise ConfigError("tensor value outside Q16.8 range")
    return CompressedFeatureMap(t.dims, _pack_bits(bits), flat[bits].astype(np.int32))


def decode(c: CompressedFeatureMap, lenient: bool = False) -> FeatureMapTensor:
    bits = _unpack_bits(c)
    _check(c, bits, lenient)
    h, w, ch = c.dims
    flat = np.zeros(c.size, dtype=np.int64)
    flat[bits] = c.nzvl
    return FeatureMapTensor(flat.reshape(ch, h, w))


def nonzero_coordinates(c: CompressedFeatureMap, lenient: bool = False) -> Tuple[np.ndarray, ...]:
    """(rows, cols, channels, values) of every SM entry in storage order, from the mask alone."""
    bits = _unpack_bits(c)
    _check(c, bits, lenient)
    h, w, _ = c.dims
    idx = np.flatnonzero(bits)
    ch, rem = np.divmod(idx, h * w)
    rows, cols = np.divmod(rem, w)
    return rows, cols, ch, c.nzvl.astype(np.int64)


def iter_nonzero(c: CompressedFeatureMap, lenient: bool = False) -> Iterator[Tuple[int, int, int, int]]:
    """Stream (row, col, channel, value) word by word, like an input decoder walking the SM."""
    h, w, _ = c.dims
    n = c.size
    if c.sm.size != _words_for(n):
        raise CorruptStream(f"sparsity map has {c.sm.size} words, expected {_words_for(n)}")
    plane = h * w
    k = 0
    for wi, word in enumerate(c.sm.tolist()):
        while word:
            low = word & -word
            bit = low.bit_length() - 1
            word ^= low
            i = wi * WORD_BITS + bit
            if i >= n:
                raise CorruptStream("sparsity map has bits set beyond the tensor size")
            if k >= c.nzvl.size:
                raise CorruptStream(f"popcount(sm) exceeds nzvl length {c.nzvl.size}")
            v = int(c.nzvl[k])
            if v == 0 and not lenient:
                raise CorruptStream("zero value in non-zero value list")
            ch, rem = divmod(i, plane)
            r, col = divmod(rem, w)
            k += 1
            yield r, col, ch, v
    if k != c.nzvl.size:
        raise CorruptStream(f"popcount(sm)={k} but nzvl has {c.nzvl.size} entries")


def compressed_size_bits(c: CompressedFeatureMap) -> int:
    return _words_for(c.size) * WORD_BITS + VALUE_BITS * int(c.nzvl.size)


def compression_ratio(t: FeatureMapTensor) -> float:
    dense_bits = VALUE_BITS * t.values.size
    ratio = dense_bits / compressed_size_bits(encode(t))
    logger.debug("compression %s", log_ctx(dims=t.dims, ratio=f"{ratio:.4f}"))
    return ratio


# ---------- CFM1 / DNS1 ----------

def dump_compressed(c: CompressedFeatureMap, sink: BinaryIO) -> None:
    h, w, ch = c.dims
    sink.write(CFM_MAGIC)
    sink.write(struct.pack(_CFM_HEADER, h, w, ch, 0, int(c.nzvl.size)))
    sink.write(c.sm.astype("<u4").tobytes())
    sink.write(c.nzvl.astype("<i4").tobytes())


def load_compressed(src: BinaryIO) -> CompressedFeatureMap:
    h, w, ch, _reserved, count = read_header(src, CFM_MAGIC, _CFM_HEADER)
    if min(h, w, ch) < 1:
        raise CorruptStream(f"invalid CFM1 dims {h}x{w}x{ch}")
    words = _words_for(h * w * ch)
    sm = np.frombuffer(read_exact(src, 4 * words, "CFM1 sparsity map"), dtype="<u4")
    nzvl = np.frombuffer(read_exact(src, 4 * count, "CFM1 value list"), dtype="<i4")
    if src.read(1):
        raise CorruptStream("trailing bytes after CFM1 value list")
    return CompressedFeatureMap((h, w, ch), sm, nzvl)


def dump_dense(t: FeatureMapTensor, sink: BinaryIO) -> None:
    sink.write(DNS_MAGIC)
    sink.write(struct.pack(_DNS_HEADER, t.height, t.width, t.channels, 0))
    sink.write(t.values.astype("<i4").tobytes(order="C"))


def load_dense(src: BinaryIO) -> FeatureMapTensor:
    h, w, ch, _reserved = read_header(src, DNS_MAGIC, _DNS_HEADER)
    if min(h, w, ch) < 1:
        raise CorruptStream(f"invalid DNS1 dims {h}x{w}x{ch}")
    payload = read_exact(src, 4 * h * w * ch, "DNS1 values")
    if src.read(1):
        raise CorruptStream("trailing bytes after DNS1 values")
    return FeatureMapTensor(np.frombuffer(payload, dtype="<i4").reshape(ch, h, w).astype(np.int64))
