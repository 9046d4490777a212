"""
evhop_cli.py: command-line front end: plain files in, plain files out.

  gen        synthetic AER stream (edge | noise) -> CSV/BIN
  frames     events -> one HST1 file per k_events
  normalize  HST1 -> NRM1 (float | fixed)
  encode     NRM1 or DNS1 -> CFM1
  decode     CFM1 -> DNS1
  infer      CFM1 + network -> scores.json
  pipeline   events -> classifications.csv, trace.csv, baseline_trace.csv, summary.txt
  bench      timing model only: pipelined vs sequential stage sets -> summary.txt
  netgen     seeded Roshambo-shaped network -> JSON document + WGT1 sidecar

Errors: one line `error kind=<Exception> msg="..."` on stderr, exit 1. Usage errors exit 2.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Iterator, List, Optional, Sequence

from config import settings
from config.logging_config import setup_logging
from config.settings import RunConfig, parse_size
from core import aer_stream
from core.aer_stream import AerEvent, SensorGeometry
from core.errors import ConfigError, CorruptStream, EvhopError
from core.histogram import DoubleBuffer, dump_histogram, load_histogram
from core.normalizer import NRM_MAGIC, NormVariant, dump_normalized, load_normalized, normalize
from core.nullhop import run_network
from core.pipeline import (
    Mode,
    TimingSpec,
    baseline_stages,
    end_to_end,
    hardware_stages,
    norm_stage_cycles,
    simulate,
    speedup,
    write_trace_csv,
)
from core.sparsity import (
    CFM_MAGIC,
    DNS_MAGIC,
    FeatureMapTensor,
    decode,
    dump_compressed,
    dump_dense,
    encode,
    load_compressed,
    load_dense,
)
from core.utils import fmt_q, log_ctx
from report_renderer import mac_stats_dict, render_bench, render_scores, render_summary
from services.network_store import load_network, random_roshambo_network, save_network

logger = logging.getLogger("evhop-cli")


# ---------- helpers ----------

def _geometry(text: str) -> SensorGeometry:
    w, h = parse_size(text)
    return SensorGeometry(w, h)


def _variant(args) -> NormVariant:
    return NormVariant.parse(args.norm_variant)


def _events_from(paths: Sequence[Path], geometry: SensorGeometry) -> Iterator[AerEvent]:
    for p in paths:
        with open(p, "rb") as f:
            yield from aer_stream.read_events(f, aer_stream.guess_format(p), geometry)


def _peek_magic(path: Path) -> bytes:
    with open(path, "rb") as f:
        return f.read(4)


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _generate(pattern: str, geometry: SensorGeometry, rate: float, duration_us: int, seed: int,
              speed: float) -> List[AerEvent]:
    if pattern == "edge":
        return aer_stream.gen_moving_edge(geometry, speed, rate, duration_us, seed)
    if pattern == "noise":
        return aer_stream.gen_uniform_noise(geometry, rate, duration_us, seed)
    raise ConfigError(f"unknown pattern {pattern!r} (edge|noise)")


# ---------- commands ----------

def cmd_gen(args) -> int:
    geometry = _geometry(args.sensor)
    events = _generate(args.pattern, geometry, args.rate, args.duration_us, args.seed, args.speed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fmt = args.format or aer_stream.guess_format(out)
    with open(out, "wb") as f:
        n = aer_stream.write_events(events, f, fmt, geometry)
    print(f"events={n} out={out}")
    return 0


def cmd_frames(args) -> int:
    tw, th = parse_size(args.resolution)
    geometry = _geometry(args.sensor)
    buffers = DoubleBuffer((tw, th), args.k_events, geometry, args.polarity_mode)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames = buffers.accumulate_many(_events_from([Path(p) for p in args.events], geometry))
    for h in frames:
        with open(out_dir / f"frame_{h.frame_seq:05d}.hst", "wb") as f:
            dump_histogram(h, f)
    logger.info("frames written %s", log_ctx(frames=len(frames), out_dir=out_dir,
                                             accepted=buffers.stats.events_accepted))
    print(f"frames={len(frames)} out_dir={out_dir}")
    return 0


def cmd_normalize(args) -> int:
    with open(args.hist, "rb") as f:
        h = load_histogram(f)
    frame = normalize(h, args.mode, _variant(args))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as f:
        dump_normalized(frame, f)
    st = frame.stats
    if st is not None and st.sigma_q is not None:
        print(f"S={st.S} c={st.c} mean {fmt_q(st.mean_q.raw, 16)} sigma {fmt_q(st.sigma_q.raw, 16)}")
    elif st is not None:
        print(f"S={st.S} c={st.c} mean={st.mean:.8f} sigma={st.sigma:.8f}")
    print(f"degenerate={frame.degenerate_flag.name} out={out}")
    return 0


def cmd_encode(args) -> int:
    src = Path(args.input)
    magic = _peek_magic(src)
    with open(src, "rb") as f:
        if magic == NRM_MAGIC:
            t = FeatureMapTensor(load_normalized(f).to_q16_8())
        elif magic == DNS_MAGIC:
            t = load_dense(f)
        else:
            raise CorruptStream(f"{src}: expected NRM1 or DNS1, got {magic!r}")
    c = encode(t)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as f:
        dump_compressed(c, f)
    print(f"dims={c.dims} nnz={c.nzvl.size} out={out}")
    return 0


def cmd_decode(args) -> int:
    with open(args.input, "rb") as f:
        c = load_compressed(f)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as f:
        dump_dense(decode(c, lenient=args.lenient), f)
    print(f"dims={c.dims} out={out}")
    return 0


def cmd_infer(args) -> int:
    net = load_network(args.network)
    src = Path(args.input)
    if _peek_magic(src) != CFM_MAGIC:
        raise CorruptStream(f"{src}: expected CFM1")
    with open(src, "rb") as f:
        c = load_compressed(f)
    result = run_network(c, net, workers=args.workers)
    doc = {
        "labels": list(result.labels),
        "scores_raw": [int(v) for v in result.scores_raw],
        "predicted": result.predicted,
        "label": result.label,
        "macs": mac_stats_dict(result.total_stats),
    }
    out = Path(args.out)
    _write_json(out, doc)
    sys.stdout.write(render_scores(list(result.labels), result.scores_raw, result.predicted))
    return 0


def _run_config(args) -> RunConfig:
    return RunConfig(
        inputs=[Path(p) for p in args.events], gen_pattern=args.gen, gen_rate_eps=args.rate,
        gen_duration_us=args.duration_us, seed=args.seed, sensor=args.sensor, k_events=args.k_events,
        resolution=args.resolution, polarity_mode=args.polarity_mode, norm_variant=args.norm_variant,
        network=Path(args.network) if args.network else None, timing=args.timing or "",
        out_dir=Path(args.out_dir), threaded=args.threaded,
    ).validate()


def _classification_rows(result) -> Iterator[list]:
    for f in result.frames:
        yield ([f.frame_seq, f.events_in, f.t_first_us, f.t_last_us, f.degenerate.name, f.nnz_in,
                f.predicted, f.label] + [int(v) for v in f.scores_raw])


def cmd_pipeline(args) -> int:
    cfg = _run_config(args)
    geometry = _geometry(cfg.sensor)
    tw, th = parse_size(cfg.resolution)
    timing = TimingSpec.parse(cfg.timing)
    if cfg.network is not None:
        net = load_network(cfg.network)
    else:
        net = random_roshambo_network(cfg.seed, input_shape=(th, tw, 1))
    if cfg.inputs:
        events = _events_from(cfg.inputs, geometry)
    else:
        events = iter(_generate(cfg.gen_pattern, geometry, cfg.gen_rate_eps, cfg.gen_duration_us,
                                cfg.seed, args.speed))

    result = end_to_end(events, net, timing, k_events=cfg.k_events, target=(tw, th), geometry=geometry,
                        polarity_mode=cfg.polarity_mode, variant=NormVariant.parse(cfg.norm_variant),
                        mode=args.mode, threaded=cfg.threaded, workers=args.workers)

    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "classifications.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frame_seq", "events_in", "t_first_us", "t_last_us", "degenerate", "nnz_in",
                    "predicted", "label"] + [f"score_{lbl}_raw" for lbl in net.fc_labels])
        w.writerows(_classification_rows(result))
    if result.trace is not None:
        with open(out_dir / "trace.csv", "w", newline="", encoding="utf-8") as f:
            write_trace_csv(result.trace, f)
        with open(out_dir / "baseline_trace.csv", "w", newline="", encoding="utf-8") as f:
            write_trace_csv(result.baseline, f)
    summary = render_summary(result, timing.mac_units)
    (out_dir / "summary.txt").write_text(summary, encoding="utf-8")
    sys.stdout.write(summary)
    return 0


def cmd_bench(args) -> int:
    timing = TimingSpec.parse(args.timing)
    rate = timing.rate_eps or args.rate
    tw, th = parse_size(args.resolution)
    started = time.perf_counter()
    pip = simulate(hardware_stages(timing, args.k_events, tw * th), args.frames, Mode.PIPELINED,
                   event_rate_eps=rate)
    seq = simulate(baseline_stages(timing), args.frames, Mode.SEQUENTIAL)
    elapsed = time.perf_counter() - started
    logger.info("bench host time %s", log_ctx(frames=args.frames, seconds=f"{elapsed:.6f}"))
    text = render_bench(pip, seq, speedup(seq, pip), norm_stage_cycles(timing, tw * th))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_netgen(args) -> int:
    tw, th = parse_size(args.resolution)
    net = random_roshambo_network(args.seed, input_shape=(th, tw, 1))
    doc, sidecar = save_network(net, args.out)
    print(f"network={doc} weights={sidecar}")
    return 0


# ---------- parser ----------

def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--k-events", type=int, default=settings.K_EVENTS)
    g.add_argument("--resolution", default=settings.RESOLUTION, help="WIDTHxHEIGHT (default 64x64)")
    g.add_argument("--sensor", default=settings.SENSOR, help="sensor WIDTHxHEIGHT for CSV input")
    g.add_argument("--polarity-mode", choices=settings.POLARITY_MODES, default=settings.POLARITY_MODE)
    g.add_argument("--norm-variant", choices=settings.NORM_VARIANTS, default=settings.NORM_VARIANT)
    g.add_argument("--mode", choices=settings.NORM_MODES, default="fixed")
    g.add_argument("--timing", default="", help="key=value stage settings, e.g. cnn_ms=8,rate_eps=333000")
    g.add_argument("--seed", type=int, default=settings.SEED)
    g.add_argument("--workers", type=int, default=1)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evhop", description="DVS histogram -> zero-skipping CNN pipeline model")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_global_flags()]

    p = sub.add_parser("gen", parents=common, help="write a synthetic event stream")
    p.add_argument("--pattern", choices=settings.GEN_PATTERNS, default="edge")
    p.add_argument("--rate", type=float, default=1_000_000.0, help="events per second")
    p.add_argument("--duration-us", type=int, default=20_000)
    p.add_argument("--speed", type=float, default=2000.0, help="edge speed in px/s")
    p.add_argument("--format", choices=("csv", "bin"), default=None)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("frames", parents=common, help="collect HST1 histograms")
    p.add_argument("events", nargs="+")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_frames)

    p = sub.add_parser("normalize", parents=common, help="HST1 -> NRM1")
    p.add_argument("hist")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("encode", parents=common, help="NRM1/DNS1 -> CFM1")
    p.add_argument("input")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", parents=common, help="CFM1 -> DNS1")
    p.add_argument("input")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--lenient", action="store_true", help="accept zero entries in the value list")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("infer", parents=common, help="CFM1 + network -> scores.json")
    p.add_argument("input")
    p.add_argument("--network", required=True)
    p.add_argument("-o", "--out", default="scores.json")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("pipeline", parents=common, help="end-to-end functional run plus timing traces")
    p.add_argument("events", nargs="*")
    p.add_argument("--gen", choices=settings.GEN_PATTERNS, default=None, help="generate input instead of reading")
    p.add_argument("--rate", type=float, default=1_000_000.0)
    p.add_argument("--duration-us", type=int, default=20_000)
    p.add_argument("--speed", type=float, default=2000.0)
    p.add_argument("--network", default=None, help="network JSON (default: seeded random Roshambo-shaped)")
    p.add_argument("--out-dir", default="out")
    p.add_argument("--threaded", action="store_true")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("bench", parents=common, help="timing model: pipelined vs sequential")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--rate", type=float, default=1_000_000.0)
    p.add_argument("--out-dir", default="out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("netgen", parents=common, help="write a seeded Roshambo-shaped network")
    p.add_argument("-o", "--out", default="roshambo.json")
    p.set_defaults(func=cmd_netgen)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except (EvhopError, OSError, ValueError) as e:
        msg = str(e).replace('"', "'")
        print(f'error kind={type(e).__name__} msg="{msg}"', file=sys.stderr)
        logger.debug("command failed", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
