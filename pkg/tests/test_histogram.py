import io
import threading
import time

import numpy as np
import pytest

from core.aer_stream import AerEvent, Polarity, SensorGeometry, gen_moving_edge
from core.errors import BackpressureStall, ConfigError, CorruptStream
from core.histogram import (
    BufferState,
    CropWindow,
    DoubleBuffer,
    EventHistogram,
    dump_histogram,
    load_histogram,
    map_coordinate,
    reset_buffer,
)

DAVIS = SensorGeometry.DAVIS240


def ev(x, y, t=0, pol=Polarity.ON):
    return AerEvent(t, x, y, pol)


@pytest.mark.parametrize("x, y, want", [(0, 0, (0, 0)), (239, 0, (63, 0)), (120, 0, (32, 0)), (0, 179, (0, 63))])
def test_map_coordinate(x, y, want):
    assert map_coordinate(ev(x, y), DAVIS, (64, 64)) == want


def test_frame_completes_at_exactly_k_events():
    db = DoubleBuffer(k_events=2000)
    events = gen_moving_edge(DAVIS, 2000, 1e6, 2000, rng_seed=1)
    assert len(events) == 2000
    for e in events[:-1]:
        assert db.accumulate(e) is None
    frame = db.accumulate(events[-1])
    assert frame is not None
    assert frame.state == BufferState.READY
    assert frame.events_in == 2000
    assert int(frame.counts.sum()) == 2000
    assert frame.frame_seq == 0
    assert frame.t_first_us == events[0].timestamp_us
    assert frame.t_last_us == events[-1].timestamp_us


def test_same_pixel_k_times():
    db = DoubleBuffer(k_events=2000)
    frames = db.accumulate_many(ev(5, 5) for _ in range(2000))
    assert len(frames) == 1
    f = frames[0]
    assert int(f.counts[1, 1]) == 2000
    assert int(f.nz_mask.sum()) == 1


def test_k1_emits_every_event():
    db = DoubleBuffer(k_events=1)
    frames = db.accumulate_many(ev(i, i, t=i) for i in range(10))
    assert [f.frame_seq for f in frames] == list(range(10))
    assert all(int(f.counts.sum()) == 1 for f in frames)


def test_frames_sum_to_k_and_mask_tracks_counts():
    events = gen_moving_edge(DAVIS, 2000, 1e6, 10_000, rng_seed=4)
    frames = DoubleBuffer(k_events=2000).accumulate_many(events)
    assert len(frames) == len(events) // 2000
    for f in frames:
        assert int(f.counts.sum()) == 2000
        assert np.array_equal(f.nz_mask, f.counts != 0)


def test_collection_is_deterministic():
    events = gen_moving_edge(DAVIS, 2000, 1e6, 8000, rng_seed=9)
    a = DoubleBuffer().accumulate_many(events)
    b = DoubleBuffer().accumulate_many(events)
    assert all(np.array_equal(x.counts, y.counts) for x, y in zip(a, b))


def test_counter_saturates():
    db = DoubleBuffer(k_events=100_000)
    for _ in range(70_000):
        db.accumulate(ev(0, 0))
    h = db.collecting
    assert int(h.counts[0, 0]) == 65535
    assert h.saturated
    assert h.events_in == 70_000


def test_reset_buffer():
    h = EventHistogram(4, 4)
    h.add(1, 2, Polarity.ON)
    h.t_first_us = h.t_last_us = 9
    reset_buffer(h)
    assert int(h.counts.sum()) == 0
    assert not h.nz_mask.any()
    assert h.events_in == 0
    assert h.t_first_us is None


def test_stall_drop_counts_events():
    db = DoubleBuffer(k_events=1, on_stall="drop")
    assert db.accumulate(ev(0, 0)) is not None
    assert db.accumulate(ev(1, 1)) is not None
    assert db.stalled
    assert db.accumulate(ev(2, 2)) is None
    assert db.stats.events_dropped == 1
    assert db.stats.stall_episodes == 1


def test_stall_raise():
    db = DoubleBuffer(k_events=1, on_stall="raise")
    db.accumulate(ev(0, 0))
    db.accumulate(ev(1, 1))
    with pytest.raises(BackpressureStall):
        db.accumulate(ev(2, 2))


def test_stall_block_resumes_after_release():
    db = DoubleBuffer(k_events=1, on_stall="block")
    first = db.accumulate(ev(0, 0))
    db.accumulate(ev(1, 1))
    done = threading.Event()
    out = []

    def producer():
        out.append(db.accumulate(ev(2, 2)))
        done.set()

    t = threading.Thread(target=producer, daemon=True)
    t.start()
    time.sleep(0.05)
    assert not done.is_set()
    db.release(first)
    assert done.wait(2.0)
    assert out[0] is not None and out[0].frame_seq == 2
    assert db.stats.events_dropped == 0


def test_release_hands_buffer_back():
    db = DoubleBuffer(k_events=2)
    states = []
    for i in range(20):
        full = db.accumulate(ev(i, 0))
        states.append(sum(b.state == BufferState.COLLECTING for b in db.buffers))
        if full is not None:
            db.begin_normalizing(full)
            assert full.state == BufferState.NORMALIZING
            db.release(full)
            assert full.state == BufferState.IDLE
    assert all(n == 1 for n in states)
    assert db.stats.frames == 10


def test_release_rejects_idle_buffer():
    db = DoubleBuffer()
    idle = db.buffers[1]
    with pytest.raises(ConfigError):
        db.release(idle)
    with pytest.raises(ConfigError):
        db.begin_normalizing(idle)


def test_crop_window():
    crop = CropWindow(0, 0, 120, 90)
    db = DoubleBuffer(k_events=10, crop=crop)
    db.accumulate(ev(200, 10))
    db.accumulate(ev(119, 89))
    assert db.stats.events_cropped == 1
    assert int(db.collecting.counts[63, 63]) == 1


def test_signed_polarity_mode():
    db = DoubleBuffer(k_events=3, polarity_mode="signed")
    db.accumulate(ev(0, 0, pol=Polarity.ON))
    db.accumulate(ev(0, 0, pol=Polarity.OFF))
    frame = db.accumulate(ev(4, 0, pol=Polarity.OFF))
    assert frame.counts.dtype == np.int16
    assert int(frame.counts[0, 0]) == 0
    assert int(frame.counts[0, 1]) == -1
    assert not frame.nz_mask[0, 0]


def test_bad_collector_config():
    with pytest.raises(ConfigError):
        DoubleBuffer(k_events=0)
    with pytest.raises(ConfigError):
        DoubleBuffer(on_stall="wait")
    with pytest.raises(ConfigError):
        EventHistogram(polarity_mode="both")


# ---------- HST1 ----------

def _hist():
    rng = np.random.default_rng(0)
    return EventHistogram.from_counts(rng.integers(0, 50, size=(64, 64)), frame_seq=7)


def test_hst_roundtrip():
    h = _hist()
    buf = io.BytesIO()
    dump_histogram(h, buf)
    buf.seek(0)
    back = load_histogram(buf)
    assert np.array_equal(back.counts, h.counts)
    assert (back.frame_seq, back.events_in) == (7, h.events_in)


def test_hst_bad_magic_and_truncation():
    buf = io.BytesIO()
    dump_histogram(_hist(), buf)
    data = buf.getvalue()
    with pytest.raises(CorruptStream):
        load_histogram(io.BytesIO(b"XXXX" + data[4:]))
    with pytest.raises(CorruptStream):
        load_histogram(io.BytesIO(data[:-3]))
    with pytest.raises(CorruptStream):
        load_histogram(io.BytesIO(data + b"\x00"))


def test_hst_rejects_negative_signed_counts():
    h = EventHistogram.from_counts([[0, -1], [2, 0]])
    assert h.polarity_mode == "signed"
    with pytest.raises(ConfigError):
        dump_histogram(h, io.BytesIO())
