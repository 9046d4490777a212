"""
core/aer_stream.py: address-event data model, CSV/BIN file I/O and synthetic event generators.
- Provides: Polarity, AerEvent, SensorGeometry, read_events(), write_events(),
  gen_moving_edge(), gen_uniform_noise()

CSV: header `timestamp_us,x,y,polarity`, one event per line, polarity in {0,1}.
BIN: "EVT1", u16 width, u16 height, u64 count (little-endian), then 9-byte records
     u32 timestamp_us, u16 x, u16 y, u8 polarity.
"""
from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass
from typing import BinaryIO, ClassVar, Iterable, Iterator, List, Optional

import numpy as np

from core.errors import AerParseError, AerRangeError, ConfigError
from core.utils import log_ctx

logger = logging.getLogger(__name__)

CSV_HEADER = "timestamp_us,x,y,polarity"
BIN_MAGIC = b"EVT1"
_BIN_HEADER = struct.Struct("<4sHHQ")
_BIN_RECORD = struct.Struct("<IHHB")
_U32_MAX = 0xFFFFFFFF


class Polarity(enum.IntEnum):
    OFF = 0
    ON = 1


@dataclass(frozen=True)
class SensorGeometry:
    width: int = 240
    height: int = 180

    DAVIS240: ClassVar["SensorGeometry"]

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"sensor geometry must be >= 1x1, got {self.width}x{self.height}")

    def contains(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height


SensorGeometry.DAVIS240 = SensorGeometry(240, 180)


@dataclass(frozen=True)
class AerEvent:
    timestamp_us: int
    x: int
    y: int
    polarity: Polarity


class _OrderWatch:
    """Counts timestamp regressions; warns once per stream."""

    def __init__(self, source: str):
        self.source = source
        self.last = None
        self.regressions = 0
        self.first_at = None

    def see(self, ts: int, where: str) -> None:
        if self.last is not None and ts < self.last:
            self.regressions += 1
            if self.first_at is None:
                self.first_at = where
        self.last = ts

    def close(self) -> None:
        if self.regressions:
            logger.warning("non-monotone timestamps kept %s",
                           log_ctx(source=self.source, regressions=self.regressions, first=self.first_at))


# ---------- reading ----------

def read_events(source: BinaryIO, fmt: str = "csv",
                geometry: Optional[SensorGeometry] = None) -> Iterator[AerEvent]:
    """Yield events in file order. CSV uses `geometry` (DAVIS240 default); BIN carries its own."""
    fmt = fmt.lower()
    if fmt == "csv":
        return _read_csv(source, geometry or SensorGeometry.DAVIS240)
    if fmt == "bin":
        return _read_bin(source, geometry)
    raise ConfigError(f"unknown event format {fmt!r} (csv|bin)")


def _read_csv(source: BinaryIO, geometry: SensorGeometry) -> Iterator[AerEvent]:
    watch = _OrderWatch("csv")
    offset = 0
    try:
        # decode per line so a bad byte is reported on its own line
        for lineno, raw in enumerate(source, start=1):
            try:
                line = raw.decode("utf-8").strip()
            except UnicodeDecodeError as e:
                raise AerParseError(f"invalid UTF-8 byte {raw[e.start:e.start + 1]!r}",
                                    line=lineno, offset=offset + e.start) from None
            offset += len(raw)
            if not line:
                continue
            if lineno == 1 and line.lstrip("\ufeff").replace(" ", "") == CSV_HEADER:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise AerParseError(f"expected 4 fields, got {len(parts)}", line=lineno)
            try:
                ts, x, y, pol = (int(p) for p in parts)
            except ValueError:
                raise AerParseError(f"non-integer field in {line!r}", line=lineno)
            if pol not in (0, 1):
                raise AerParseError(f"polarity must be 0 or 1, got {pol}", line=lineno)
            if ts < 0:
                raise AerParseError(f"negative timestamp {ts}", line=lineno)
            if not geometry.contains(x, y):
                raise AerRangeError(
                    f"event ({x},{y}) outside {geometry.width}x{geometry.height} sensor", line=lineno)
            watch.see(ts, f"line {lineno}")
            yield AerEvent(ts, x, y, Polarity(pol))
    finally:
        watch.close()


def _read_bin(source: BinaryIO, geometry: Optional[SensorGeometry]) -> Iterator[AerEvent]:
    head = source.read(_BIN_HEADER.size)
    if not head:
        return
    if len(head) != _BIN_HEADER.size:
        raise AerParseError("truncated EVT1 header", offset=0)
    magic, width, height, count = _BIN_HEADER.unpack(head)
    if magic != BIN_MAGIC:
        raise AerParseError(f"bad magic {magic!r}", offset=0)
    file_geom = SensorGeometry(width, height)
    if geometry is not None and geometry != file_geom:
        logger.info("BIN geometry overrides caller geometry %s",
                    log_ctx(file=f"{width}x{height}", caller=f"{geometry.width}x{geometry.height}"))
    watch = _OrderWatch("bin")
    offset = _BIN_HEADER.size
    try:
        for i in range(count):
            rec = source.read(_BIN_RECORD.size)
            if len(rec) != _BIN_RECORD.size:
                raise AerParseError(f"truncated record {i} of {count}", offset=offset)
            ts, x, y, pol = _BIN_RECORD.unpack(rec)
            if pol > 1:
                raise AerParseError(f"polarity must be 0 or 1, got {pol}", offset=offset)
            if not file_geom.contains(x, y):
                raise AerRangeError(f"event ({x},{y}) outside {width}x{height} sensor", offset=offset)
            watch.see(ts, f"offset {offset}")
            offset += _BIN_RECORD.size
            yield AerEvent(ts, x, y, Polarity(pol))
        if source.read(1):
            raise AerParseError(f"trailing bytes after {count} records", offset=offset)
    finally:
        watch.close()


# ---------- writing ----------

def _check_writable(ev: AerEvent, geometry: SensorGeometry, **where) -> None:
    if not geometry.contains(ev.x, ev.y):
        raise AerRangeError(f"event ({ev.x},{ev.y}) outside {geometry.width}x{geometry.height} sensor", **where)
    if ev.timestamp_us < 0:
        raise AerParseError(f"negative timestamp {ev.timestamp_us}", **where)
    if int(ev.polarity) not in (0, 1):
        raise AerParseError(f"polarity must be 0 or 1, got {ev.polarity}", **where)


def write_events(events: Iterable[AerEvent], sink: BinaryIO, fmt: str = "csv",
                 geometry: Optional[SensorGeometry] = None) -> int:
    """Serialize events; returns the number written. BIN needs the geometry for its header.

    Events outside `geometry` raise AerRangeError before anything that would not read back is written.
    """
    fmt = fmt.lower()
    geometry = geometry or SensorGeometry.DAVIS240
    if fmt == "csv":
        sink.write((CSV_HEADER + "\n").encode("utf-8"))
        n = 0
        lines: List[str] = []
        for ev in events:
            _check_writable(ev, geometry, line=n + 2)
            lines.append(f"{ev.timestamp_us},{ev.x},{ev.y},{int(ev.polarity)}\n")
            n += 1
            if len(lines) >= 65536:
                sink.write("".join(lines).encode("utf-8"))
                lines.clear()
        if lines:
            sink.write("".join(lines).encode("utf-8"))
        return n
    if fmt == "bin":
        events = list(events)
        if geometry.width > 0xFFFF or geometry.height > 0xFFFF:
            raise ConfigError(f"sensor {geometry.width}x{geometry.height} does not fit the u16 EVT1 header")
        buf = bytearray()
        for i, ev in enumerate(events):
            _check_writable(ev, geometry, offset=_BIN_HEADER.size + i * _BIN_RECORD.size)
            if ev.timestamp_us > _U32_MAX:
                raise ConfigError(f"timestamp {ev.timestamp_us} does not fit u32")
            buf += _BIN_RECORD.pack(ev.timestamp_us, ev.x, ev.y, int(ev.polarity))
        sink.write(_BIN_HEADER.pack(BIN_MAGIC, geometry.width, geometry.height, len(events)))
        sink.write(bytes(buf))
        return len(events)
    raise ConfigError(f"unknown event format {fmt!r} (csv|bin)")


def guess_format(path: str) -> str:
    return "bin" if str(path).lower().endswith((".bin", ".evt")) else "csv"


# ---------- synthetic generators ----------

def _event_times(rng: np.random.Generator, rate_eps: float, duration_us: int) -> np.ndarray:
    if rate_eps <= 0:
        raise ConfigError(f"rate_eps must be > 0, got {rate_eps}")
    if duration_us <= 0:
        return np.zeros(0, dtype=np.int64)
    n = int(round(rate_eps * duration_us / 1e6))
    return np.sort(rng.integers(0, duration_us, size=n, dtype=np.int64))


def gen_moving_edge(geometry: SensorGeometry, speed_px_per_s: float, rate_eps: float,
                    duration_us: int, rng_seed: int, bar_width: Optional[int] = None) -> List[AerEvent]:
    """A bright bar sweeping left to right (wrapping): ON events on its leading edge, OFF on its trailing edge.

    Event count is rate_eps * duration exactly (rounded); timestamps are uniform and sorted.
    """
    rng = np.random.default_rng(rng_seed)
    times = _event_times(rng, rate_eps, duration_us)
    n = times.size
    if n == 0:
        return []
    w, h = geometry.width, geometry.height
    bar = bar_width if bar_width is not None else max(1, w // 8)
    lead = (speed_px_per_s * times / 1e6) % w
    on = rng.random(n) < 0.5
    edge = np.where(on, lead, lead - bar)
    xs = np.floor(edge + rng.normal(0.0, 1.0, n)).astype(np.int64) % w
    y0, y1 = h // 4, max(h // 4 + 1, (3 * h) // 4)
    ys = rng.integers(y0, y1, size=n, dtype=np.int64)
    pols = np.where(on, Polarity.ON, Polarity.OFF)
    logger.debug("generated moving edge %s", log_ctx(events=n, rate_eps=rate_eps, duration_us=duration_us))
    return [AerEvent(int(t), int(x), int(y), Polarity(int(p))) for t, x, y, p in zip(times, xs, ys, pols)]


def gen_uniform_noise(geometry: SensorGeometry, rate_eps: float, duration_us: int,
                      rng_seed: int) -> List[AerEvent]:
    """Uncorrelated events uniform over the sensor, random polarity."""
    rng = np.random.default_rng(rng_seed)
    times = _event_times(rng, rate_eps, duration_us)
    n = times.size
    xs = rng.integers(0, geometry.width, size=n)
    ys = rng.integers(0, geometry.height, size=n)
    pols = rng.integers(0, 2, size=n)
    return [AerEvent(int(t), int(x), int(y), Polarity(int(p))) for t, x, y, p in zip(times, xs, ys, pols)]
