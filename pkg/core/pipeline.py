"""
core/pipeline.py: frame-level timing model of collection -> normalization -> CNN, plus the
end-to-end driver that runs the functional chain and produces a trace next to it.
- Provides: Mode, StageTiming, TimingSpec, FrameTiming, PipelineTrace, simulate(), speedup(),
  collection_duration(), baseline_stages(), hardware_stages(), end_to_end(), write_trace_csv()

Schedules
  SEQUENTIAL: a frame enters stage 0 only after the previous frame left the last stage.
  PIPELINED:  every stage works on a different frame. The event source is held back so a
              frame never waits between stages; the hold is reported as held_us.
Per-frame latency is the sum of its stage durations in both modes; only the period differs.
"""
from __future__ import annotations

import csv
import enum
import logging
import queue
import threading
from dataclasses import dataclass, field, fields
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, TextIO, Tuple

import numpy as np

from config import settings
from core.aer_stream import AerEvent, SensorGeometry
from core.errors import ConfigError
from core.histogram import CollectorStats, DoubleBuffer, EventHistogram
from core.normalizer import LITERAL, Degenerate, NormVariant, norm_pipeline_cycles, normalize
from core.nullhop import MacStats, NetworkConfig, run_network
from core.sparsity import FeatureMapTensor, encode
from core.utils import log_ctx

logger = logging.getLogger(__name__)


class Mode(enum.Enum):
    SEQUENTIAL = "sequential"
    PIPELINED = "pipelined"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigError(f"mode must be sequential|pipelined, got {value!r}")


@dataclass(frozen=True)
class StageTiming:
    """One pipeline stage. Exactly one duration model is set."""
    name: str
    seconds: Optional[float] = None
    k_events: Optional[int] = None
    cycles: Optional[int] = None
    clock_hz: Optional[float] = None

    def __post_init__(self) -> None:
        models = sum(v is not None for v in (self.seconds, self.k_events, self.cycles))
        if models != 1:
            raise ConfigError(f"stage {self.name!r} needs exactly one of seconds, k_events, cycles")
        if self.seconds is not None and self.seconds <= 0:
            raise ConfigError(f"stage {self.name!r} duration must be > 0")
        if self.k_events is not None and self.k_events < 1:
            raise ConfigError(f"stage {self.name!r} k_events must be >= 1")
        if self.cycles is not None and (self.cycles < 1 or not self.clock_hz or self.clock_hz <= 0):
            raise ConfigError(f"stage {self.name!r} needs cycles >= 1 and clock_hz > 0")

    @classmethod
    def fixed(cls, name: str, seconds: float) -> "StageTiming":
        return cls(name, seconds=seconds)

    @classmethod
    def events(cls, name: str, k_events: int) -> "StageTiming":
        return cls(name, k_events=k_events)

    @classmethod
    def cycle_count(cls, name: str, cycles: int, clock_hz: float) -> "StageTiming":
        return cls(name, cycles=cycles, clock_hz=clock_hz)

    @property
    def kind(self) -> str:
        if self.seconds is not None:
            return "fixed"
        return "events" if self.k_events is not None else "cycles"

    def duration(self, event_rate_eps: Optional[float] = None) -> float:
        if self.seconds is not None:
            return self.seconds
        if self.k_events is not None:
            if event_rate_eps is None:
                raise ConfigError(f"stage {self.name!r} depends on the event rate; none given")
            return collection_duration(self.k_events, event_rate_eps)
        return self.cycles / self.clock_hz


def collection_duration(k_events: int, rate_eps: float) -> float:
    """Seconds to gather k_events at rate_eps events per second."""
    if rate_eps is None or rate_eps <= 0:
        raise ConfigError(f"event rate must be > 0, got {rate_eps}")
    return k_events / rate_eps


# ---------- trace ----------

@dataclass
class FrameTiming:
    frame_seq: int
    starts: List[float]
    ends: List[float]
    held: float = 0.0  # source hold before this frame's collection started

    @property
    def latency(self) -> float:
        return self.ends[-1] - self.starts[0]

    @property
    def stalls(self) -> List[float]:
        """Wait after each stage before the next one starts (last stage: 0)."""
        waits = [max(0.0, self.starts[k + 1] - self.ends[k]) for k in range(len(self.starts) - 1)]
        return waits + [0.0]


@dataclass
class PipelineTrace:
    mode: Mode
    stage_names: List[str]
    frames: List[FrameTiming] = field(default_factory=list)
    period: float = 0.0
    binding_stage: str = ""

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def fps(self) -> float:
        return 1.0 / self.period if self.period > 0 else 0.0

    @property
    def latency(self) -> float:
        """Mean per-frame latency."""
        if not self.frames:
            return 0.0
        return sum(f.latency for f in self.frames) / len(self.frames)

    @property
    def held(self) -> float:
        return sum(f.held for f in self.frames)

    @property
    def stalled(self) -> float:
        return sum(sum(f.stalls) for f in self.frames)

    def summary(self) -> Dict[str, object]:
        return {
            "mode": self.mode.value,
            "frames": self.n_frames,
            "period_ms": self.period * 1e3,
            "fps": self.fps,
            "latency_ms": self.latency * 1e3,
            "binding_stage": self.binding_stage,
            "held_ms": self.held * 1e3,
            "stalled_ms": self.stalled * 1e3,
        }


def _durations(stages: Sequence[StageTiming], n_frames: int, event_rate_eps: Optional[float],
               overrides: Optional[Mapping[str, Sequence[float]]]) -> np.ndarray:
    d = np.empty((n_frames, len(stages)), dtype=np.float64)
    for k, st in enumerate(stages):
        per_frame = (overrides or {}).get(st.name)
        if per_frame is None:
            d[:, k] = st.duration(event_rate_eps)
            continue
        if len(per_frame) != n_frames:
            raise ConfigError(f"override for {st.name!r} has {len(per_frame)} values, expected {n_frames}")
        d[:, k] = per_frame
    if np.any(d <= 0):
        raise ConfigError("stage durations must be > 0")
    return d


def simulate(stages: Sequence[StageTiming], n_frames: int, mode=Mode.PIPELINED,
             event_rate_eps: Optional[float] = None,
             overrides: Optional[Mapping[str, Sequence[float]]] = None) -> PipelineTrace:
    """Schedule n_frames through the stages. `overrides` maps a stage name to per-frame seconds."""
    mode = Mode.parse(mode)
    if n_frames < 1:
        raise ConfigError(f"n_frames must be >= 1, got {n_frames}")
    if not stages:
        raise ConfigError("at least one stage is required")
    names = [s.name for s in stages]
    if len(set(names)) != len(names):
        raise ConfigError(f"stage names must be unique: {names}")
    d = _durations(stages, n_frames, event_rate_eps, overrides)
    offsets = np.concatenate([np.zeros((n_frames, 1)), np.cumsum(d, axis=1)[:, :-1]], axis=1)

    trace = PipelineTrace(mode=mode, stage_names=names)
    prev_ends: Optional[np.ndarray] = None
    for f in range(n_frames):
        if prev_ends is None:
            start = 0.0
        elif mode is Mode.SEQUENTIAL:
            start = float(prev_ends[-1])
        else:
            # no-wait: stage k of this frame may not begin before stage k of the previous one ended
            start = float(np.max(prev_ends - offsets[f]))
        starts = start + offsets[f]
        ends = starts + d[f]
        held = 0.0 if prev_ends is None else start - float(prev_ends[0])
        trace.frames.append(FrameTiming(f, starts.tolist(), ends.tolist(), held))
        prev_ends = ends

    mean_d = d.mean(axis=0)
    if n_frames == 1:
        trace.period = float(mean_d.max() if mode is Mode.PIPELINED else mean_d.sum())
    else:
        completions = [fr.ends[-1] for fr in trace.frames]
        trace.period = (completions[-1] - completions[0]) / (n_frames - 1)
    trace.binding_stage = names[int(np.argmax(mean_d))]
    logger.debug("simulated %s", log_ctx(mode=mode.value, frames=n_frames,
                                         period_ms=f"{trace.period * 1e3:.4f}", binding=trace.binding_stage))
    return trace


def speedup(seq: PipelineTrace, pip: PipelineTrace) -> float:
    """(seq.period - pip.period) / pip.period."""
    if seq.n_frames != pip.n_frames:
        raise ConfigError(f"traces cover {seq.n_frames} and {pip.n_frames} frames")
    if pip.period <= 0:
        raise ConfigError("pipelined period must be > 0")
    return (seq.period - pip.period) / pip.period


# ---------- timing configuration ----------

@dataclass
class TimingSpec:
    sw_ms: float = settings.SW_MS
    cnn_ms: float = settings.CNN_MS
    rate_eps: Optional[float] = None  # None: measure collection from event timestamps
    clock_mhz: float = settings.CLOCK_HZ / 1e6
    lanes: int = settings.NORM_LANES
    lane_latency: int = settings.NORM_LATENCY
    cnn_source: str = "fixed"  # fixed | macs
    norm_ms: Optional[float] = None
    mac_units: int = settings.MAC_UNITS

    def __post_init__(self) -> None:
        if self.cnn_source not in ("fixed", "macs"):
            raise ConfigError(f"cnn_source must be fixed|macs, got {self.cnn_source!r}")
        for name in ("sw_ms", "cnn_ms", "clock_mhz"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        if self.rate_eps is not None and self.rate_eps <= 0:
            raise ConfigError("rate_eps must be > 0")
        if self.norm_ms is not None and self.norm_ms <= 0:
            raise ConfigError("norm_ms must be > 0")
        if self.lanes < 1 or self.lane_latency < 1 or self.mac_units < 1:
            raise ConfigError("lanes, lane_latency and mac_units must be >= 1")

    @property
    def clock_hz(self) -> float:
        return self.clock_mhz * 1e6

    @classmethod
    def parse(cls, text: Optional[str]) -> "TimingSpec":
        """'cnn_ms=8,rate_eps=333000' (commas or whitespace between pairs)."""
        kinds = {f.name: f for f in fields(cls)}
        values = {}
        for pair in (text or "").replace(",", " ").split():
            key, sep, raw = pair.partition("=")
            key = key.strip()
            if not sep or key not in kinds:
                raise ConfigError(f"bad timing entry {pair!r} (keys: {', '.join(kinds)})")
            try:
                if key == "cnn_source":
                    values[key] = raw.strip()
                elif key in ("lanes", "lane_latency", "mac_units"):
                    values[key] = int(raw)
                else:
                    values[key] = float(raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}")
        return cls(**values)


def baseline_stages(spec: TimingSpec) -> List[StageTiming]:
    """Software path: host collection/normalization as one opaque stage, then the CNN. Run SEQUENTIAL."""
    return [StageTiming.fixed("software", spec.sw_ms / 1e3), StageTiming.fixed("cnn", spec.cnn_ms / 1e3)]


def norm_stage_cycles(spec: TimingSpec, pixel_count: int) -> int:
    """NORM lanes plus one cycle per pixel for the sparsity-map conversion."""
    return norm_pipeline_cycles(pixel_count, spec.lane_latency, spec.lanes) + pixel_count


def hardware_stages(spec: TimingSpec, k_events: int, pixel_count: int) -> List[StageTiming]:
    """On-FPGA collection and normalization feeding the CNN. Run PIPELINED."""
    if spec.norm_ms is not None:
        norm = StageTiming.fixed("normalization", spec.norm_ms / 1e3)
    else:
        norm = StageTiming.cycle_count("normalization", norm_stage_cycles(spec, pixel_count), spec.clock_hz)
    return [StageTiming.events("collection", k_events), norm, StageTiming.fixed("cnn", spec.cnn_ms / 1e3)]


# ---------- end to end ----------

@dataclass
class FrameResult:
    frame_seq: int
    events_in: int
    t_first_us: int
    t_last_us: int
    degenerate: Degenerate
    nnz_in: int
    scores_raw: np.ndarray = field(repr=False)
    labels: Sequence[str] = field(repr=False)
    stats: MacStats = field(default_factory=MacStats, repr=False)

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.scores_raw))

    @property
    def label(self) -> str:
        return self.labels[self.predicted]


@dataclass
class EndToEndResult:
    frames: List[FrameResult]
    trace: Optional[PipelineTrace]
    baseline: Optional[PipelineTrace]
    collector: CollectorStats
    stats: MacStats

    @property
    def speedup(self) -> Optional[float]:
        if self.trace is None or self.baseline is None:
            return None
        return speedup(self.baseline, self.trace)


def _process(buffers: DoubleBuffer, h: EventHistogram, net: NetworkConfig, mode: str,
             variant: NormVariant, workers: int) -> FrameResult:
    """Normalize a READY buffer, hand it back, then compress and classify."""
    buffers.begin_normalizing(h)
    try:
        frame = normalize(h, mode, variant)
        meta = (h.frame_seq, h.events_in, h.t_first_us, h.t_last_us)
    finally:
        buffers.release(h)
    cfm = encode(FeatureMapTensor(frame.to_q16_8()))
    result = run_network(cfm, net, workers=workers)
    stats = result.total_stats
    logger.debug("frame classified %s", log_ctx(frame_seq=meta[0], label=result.label, macs=stats.macs_performed))
    return FrameResult(meta[0], meta[1], meta[2], meta[3], frame.degenerate_flag, int(cfm.nzvl.size),
                       result.scores_raw, result.labels, stats)


def _run_inline(events: Iterable[AerEvent], buffers: DoubleBuffer, work) -> List[FrameResult]:
    out = []
    for ev in events:
        full = buffers.accumulate(ev)
        if full is not None:
            out.append(work(full))
    return out


def _run_threaded(events: Iterable[AerEvent], buffers: DoubleBuffer, work) -> List[FrameResult]:
    """Collector on a producer thread, consumer here; READY buffers travel through a queue."""
    handoff: "queue.Queue[Optional[EventHistogram]]" = queue.Queue()
    failure: List[BaseException] = []
    stop = threading.Event()

    def produce() -> None:
        try:
            for ev in events:
                if stop.is_set():
                    break
                full = buffers.accumulate(ev)
                if full is not None:
                    handoff.put(full)
        except BaseException as exc:  # re-raised on the consumer side
            failure.append(exc)
        finally:
            handoff.put(None)

    producer = threading.Thread(target=produce, name="evhop-collector", daemon=True)
    producer.start()
    out = []
    try:
        while True:
            full = handoff.get()
            if full is None:
                break
            out.append(work(full))
    except BaseException:
        stop.set()
        while (left := handoff.get()) is not None:
            buffers.release(left)
        raise
    finally:
        producer.join()
    if failure:
        raise failure[0]
    return out


def end_to_end(events: Iterable[AerEvent], net: NetworkConfig, timing: Optional[TimingSpec] = None, *,
               k_events: int = settings.K_EVENTS, target: Tuple[int, int] = (64, 64),
               geometry: SensorGeometry = SensorGeometry.DAVIS240, polarity_mode: str = "count",
               variant: NormVariant = LITERAL, mode: str = "fixed", threaded: bool = False,
               workers: int = 1) -> EndToEndResult:
    """collector -> normalizer -> codec -> network for every frame, then the timing traces.

    The functional results never depend on `timing`.
    """
    timing = timing or TimingSpec()
    tw, th = target
    if (th, tw, 1) != net.input_shape:
        raise ConfigError(f"network input {net.input_shape} does not match {tw}x{th} frames")
    buffers = DoubleBuffer(target, k_events, geometry, polarity_mode,
                           on_stall="block" if threaded else "drop")

    def work(h: EventHistogram) -> FrameResult:
        return _process(buffers, h, net, mode, variant, workers)

    frames = (_run_threaded if threaded else _run_inline)(events, buffers, work)
    total = sum((f.stats for f in frames), MacStats())
    logger.info("end to end done %s", log_ctx(frames=len(frames), accepted=buffers.stats.events_accepted,
                                              dropped=buffers.stats.events_dropped, threaded=threaded))
    if not frames:
        return EndToEndResult(frames, None, None, buffers.stats, total)

    n = len(frames)
    overrides: Dict[str, List[float]] = {}
    if timing.cnn_source == "macs":
        overrides["cnn"] = [max(1, f.stats.compute_cycles(timing.mac_units)) / timing.clock_hz for f in frames]
    hw_over = dict(overrides)
    if timing.rate_eps is None:
        hw_over["collection"] = _measured_collection(frames)
    trace = simulate(hardware_stages(timing, k_events, tw * th), n, Mode.PIPELINED,
                     event_rate_eps=timing.rate_eps, overrides=hw_over)
    baseline = simulate(baseline_stages(timing), n, Mode.SEQUENTIAL, overrides=overrides)
    return EndToEndResult(frames, trace, baseline, buffers.stats, total)


def _measured_collection(frames: Sequence[FrameResult]) -> List[float]:
    """Seconds between consecutive frame completions on the event clock (first frame: its own span)."""
    out = []
    prev_last = None
    for f in frames:
        span_us = f.t_last_us - (f.t_first_us if prev_last is None else prev_last)
        out.append(max(span_us, 1) / 1e6)
        prev_last = f.t_last_us
    return out


# ---------- export ----------

TRACE_COLUMNS = ("frame_seq", "stage", "t_start_us", "t_end_us", "stalled_us", "held_us")


def write_trace_csv(trace: PipelineTrace, sink: TextIO) -> None:
    """One row per frame and stage; times in microseconds with three decimals."""
    w = csv.writer(sink, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for fr in trace.frames:
        stalls = fr.stalls
        for k, name in enumerate(trace.stage_names):
            held = fr.held if k == 0 else 0.0
            w.writerow([fr.frame_seq, name, f"{fr.starts[k] * 1e6:.3f}", f"{fr.ends[k] * 1e6:.3f}",
                        f"{stalls[k] * 1e6:.3f}", f"{held * 1e6:.3f}"])

