"""
core/histogram.py: fixed-event-count histogram collection with a ping-pong buffer pair.
- Provides: EventHistogram, BufferState, CropWindow, DoubleBuffer, CollectorStats,
  map_coordinate(), reset_buffer(), dump_histogram(), load_histogram()
- The collector owns the COLLECTING buffer. A returned (READY) buffer belongs to the consumer
  until it calls release(); only then may the collector reuse it.

HST1 dump: "HST1", u16 width, u16 height, u32 frame_seq, u32 events_in, then row-major u16 counters.
"""
from __future__ import annotations

import enum
import logging
import struct
import threading
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, List, Optional, Tuple

import numpy as np

from core.aer_stream import AerEvent, Polarity, SensorGeometry
from core.errors import BackpressureStall, ConfigError, CorruptStream
from core.utils import log_ctx, read_exact, read_header

logger = logging.getLogger(__name__)

HST_MAGIC = b"HST1"
_HST_HEADER = "<HHII"

COUNT_MAX = np.iinfo(np.uint16).max
SIGNED_MAX = np.iinfo(np.int16).max
SIGNED_MIN = np.iinfo(np.int16).min


class BufferState(enum.Enum):
    IDLE = "idle"
    COLLECTING = "collecting"
    READY = "ready"
    NORMALIZING = "normalizing"


@dataclass
class EventHistogram:
    width: int = 64
    height: int = 64
    polarity_mode: str = "count"
    counts: np.ndarray = field(default=None, repr=False)  # (height, width)
    nz_mask: np.ndarray = field(default=None, repr=False)
    events_in: int = 0
    frame_seq: int = 0
    saturated: bool = False
    state: BufferState = BufferState.IDLE
    t_first_us: Optional[int] = None
    t_last_us: Optional[int] = None

    def __post_init__(self) -> None:
        if self.polarity_mode not in ("count", "signed"):
            raise ConfigError(f"polarity_mode must be count|signed, got {self.polarity_mode!r}")
        dtype = np.uint16 if self.polarity_mode == "count" else np.int16
        if self.counts is None:
            self.counts = np.zeros((self.height, self.width), dtype=dtype)
        else:
            self.counts = np.asarray(self.counts)
            self.height, self.width = self.counts.shape
        if self.nz_mask is None:
            self.nz_mask = self.counts != 0

    @classmethod
    def from_counts(cls, counts, frame_seq: int = 0, events_in: Optional[int] = None) -> "EventHistogram":
        """Build a count-mode histogram from a 2D grid (rows = y)."""
        grid = np.asarray(counts, dtype=np.int64)
        if grid.ndim != 2:
            raise ConfigError("histogram counts must be 2D")
        if grid.min(initial=0) < 0:
            return cls(polarity_mode="signed", counts=grid.astype(np.int16), frame_seq=frame_seq,
                       events_in=int(np.abs(grid).sum()) if events_in is None else events_in)
        sat = bool((grid > COUNT_MAX).any())
        grid = np.minimum(grid, COUNT_MAX).astype(np.uint16)
        return cls(counts=grid, frame_seq=frame_seq, saturated=sat,
                   events_in=int(grid.sum()) if events_in is None else events_in)

    @property
    def pixel_count(self) -> int:
        return self.width * self.height

    @property
    def duration_us(self) -> int:
        if self.t_first_us is None or self.t_last_us is None:
            return 0
        return self.t_last_us - self.t_first_us

    def add(self, tx: int, ty: int, polarity: Polarity) -> None:
        v = int(self.counts[ty, tx])
        if self.polarity_mode == "count":
            if v >= COUNT_MAX:
                self.saturated = True
            else:
                self.counts[ty, tx] = v + 1
        else:
            step = 1 if polarity == Polarity.ON else -1
            nv = v + step
            if nv > SIGNED_MAX or nv < SIGNED_MIN:
                self.saturated = True
            else:
                self.counts[ty, tx] = nv
        self.nz_mask[ty, tx] = self.counts[ty, tx] != 0
        self.events_in += 1


def reset_buffer(h: EventHistogram) -> None:
    h.counts[...] = 0
    h.nz_mask[...] = False
    h.events_in = 0
    h.saturated = False
    h.t_first_us = None
    h.t_last_us = None


@dataclass(frozen=True)
class CropWindow:
    """Sensor-space window applied before down-sampling."""
    x0: int
    y0: int
    width: int
    height: int

    def contains(self, x: int, y: int) -> bool:
        return self.x0 <= x < self.x0 + self.width and self.y0 <= y < self.y0 + self.height


def map_coordinate(ev: AerEvent, geometry: SensorGeometry, target: Tuple[int, int],
                   crop: Optional[CropWindow] = None) -> Optional[Tuple[int, int]]:
    """Floor-scale a sensor address onto the target (width, height) grid. Returns (x', y').

    With a crop window, coordinates are taken relative to it and events outside map to None.
    """
    tw, th = target
    x, y = ev.x, ev.y
    sw, sh = geometry.width, geometry.height
    if crop is not None:
        if not crop.contains(x, y):
            return None
        x, y = x - crop.x0, y - crop.y0
        sw, sh = crop.width, crop.height
    return (x * tw) // sw, (y * th) // sh


@dataclass
class CollectorStats:
    frames: int = 0
    events_accepted: int = 0
    events_dropped: int = 0
    stall_episodes: int = 0
    events_cropped: int = 0


class DoubleBuffer:
    """Two EventHistograms in ping-pong: one COLLECTING, the other IDLE/READY/NORMALIZING.

    on_stall: "drop" counts and drops events while no buffer is free, "raise" raises
    BackpressureStall, "block" waits for the consumer's release() (needs a consumer thread).
    """

    def __init__(self, target: Tuple[int, int] = (64, 64), k_events: int = 2000,
                 geometry: SensorGeometry = SensorGeometry.DAVIS240, polarity_mode: str = "count",
                 crop: Optional[CropWindow] = None, on_stall: str = "drop"):
        if k_events < 1:
            raise ConfigError(f"k_events must be >= 1, got {k_events}")
        if on_stall not in ("drop", "raise", "block"):
            raise ConfigError(f"on_stall must be drop|raise|block, got {on_stall!r}")
        tw, th = target
        self.target = (tw, th)
        self.k_events = k_events
        self.geometry = geometry
        self.crop = crop
        self.on_stall = on_stall
        self.buffers = [EventHistogram(tw, th, polarity_mode), EventHistogram(tw, th, polarity_mode)]
        self.buffers[0].state = BufferState.COLLECTING
        self.active: Optional[int] = 0
        self.stats = CollectorStats()
        self._next_seq = 0
        self._cond = threading.Condition()

    @property
    def stalled(self) -> bool:
        return self.active is None

    @property
    def collecting(self) -> Optional[EventHistogram]:
        return None if self.active is None else self.buffers[self.active]

    def _take_idle(self) -> bool:
        for i, buf in enumerate(self.buffers):
            if buf.state == BufferState.IDLE:
                reset_buffer(buf)
                buf.state = BufferState.COLLECTING
                self.active = i
                return True
        return False

    def accumulate(self, ev: AerEvent) -> Optional[EventHistogram]:
        """Add one event; returns the full histogram when it reaches k_events."""
        with self._cond:
            if self.active is None and not self._take_idle():
                if self.on_stall == "raise":
                    raise BackpressureStall("no free histogram buffer")
                if self.on_stall == "block":
                    # release() may already have re-armed a buffer before we wake
                    while self.active is None and not self._take_idle():
                        self._cond.wait()
                else:
                    self.stats.events_dropped += 1
                    return None

            pix = map_coordinate(ev, self.geometry, self.target, self.crop)
            if pix is None:
                self.stats.events_cropped += 1
                return None
            buf = self.buffers[self.active]
            buf.add(pix[0], pix[1], ev.polarity)
            if buf.t_first_us is None:
                buf.t_first_us = ev.timestamp_us
            buf.t_last_us = ev.timestamp_us
            self.stats.events_accepted += 1
            if buf.events_in < self.k_events:
                return None

            buf.state = BufferState.READY
            buf.frame_seq = self._next_seq
            self._next_seq += 1
            self.stats.frames += 1
            self.active = None
            if not self._take_idle():
                self.stats.stall_episodes += 1
                logger.debug("collector stalled %s", log_ctx(frame_seq=buf.frame_seq))
            logger.debug("frame ready %s",
                         log_ctx(frame_seq=buf.frame_seq, events_in=buf.events_in, saturated=buf.saturated))
            return buf

    def accumulate_many(self, events: Iterable[AerEvent], release: bool = True) -> List[EventHistogram]:
        """Feed a stream; with release=True every frame is copied out and its buffer freed at once."""
        frames = []
        for ev in events:
            full = self.accumulate(ev)
            if full is None:
                continue
            if release:
                frames.append(copy_histogram(full))
                self.release(full)
            else:
                frames.append(full)
        return frames

    def begin_normalizing(self, h: EventHistogram) -> None:
        with self._cond:
            if h.state != BufferState.READY:
                raise ConfigError(f"buffer is {h.state.value}, expected ready")
            h.state = BufferState.NORMALIZING

    def release(self, h: EventHistogram) -> None:
        """Consumer hands a buffer back to the collector."""
        with self._cond:
            if h.state not in (BufferState.READY, BufferState.NORMALIZING):
                raise ConfigError(f"cannot release a {h.state.value} buffer")
            h.state = BufferState.IDLE
            if self.active is None:
                self._take_idle()
            self._cond.notify_all()


def copy_histogram(h: EventHistogram) -> EventHistogram:
    return EventHistogram(
        width=h.width, height=h.height, polarity_mode=h.polarity_mode,
        counts=h.counts.copy(), nz_mask=h.nz_mask.copy(), events_in=h.events_in,
        frame_seq=h.frame_seq, saturated=h.saturated, state=BufferState.READY,
        t_first_us=h.t_first_us, t_last_us=h.t_last_us,
    )


# ---------- HST1 ----------

def dump_histogram(h: EventHistogram, sink: BinaryIO) -> None:
    if h.polarity_mode == "signed" and int(h.counts.min(initial=0)) < 0:
        raise ConfigError("HST1 stores unsigned counters; signed histogram has negative values")
    sink.write(HST_MAGIC)
    sink.write(struct.pack(_HST_HEADER, h.width, h.height, h.frame_seq, h.events_in))
    sink.write(h.counts.astype("<u2").tobytes(order="C"))


def load_histogram(src: BinaryIO) -> EventHistogram:
    width, height, frame_seq, events_in = read_header(src, HST_MAGIC, _HST_HEADER)
    n = width * height
    payload = read_exact(src, 2 * n, "HST1 counters")
    if src.read(1):
        raise CorruptStream("trailing bytes after HST1 counters")
    counts = np.frombuffer(payload, dtype="<u2").reshape(height, width).astype(np.uint16)
    return EventHistogram(width=width, height=height, counts=counts,
                          events_in=events_in, frame_seq=frame_seq, state=BufferState.READY)
