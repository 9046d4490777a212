# report_renderer.py: plain-text run summaries (pipeline / bench / infer)
# Used by evhop_cli.py

from __future__ import annotations

import logging
from typing import Any, Dict, List, Optional

from jinja2 import Environment, StrictUndefined

from core.fixed_point import Q16_8
from core.nullhop import MacStats
from core.pipeline import EndToEndResult, PipelineTrace

logger = logging.getLogger(__name__)


# ---------- formatting helpers ----------

def _fmt_ms(v: Any) -> str:
    try:
        return f"{float(v):.4f}"
    except Exception:
        return "-"


def _fmt_pct(v: Any) -> str:
    try:
        return f"{float(v) * 100.0:.1f}%"
    except Exception:
        return "-"


def _fmt_int(v: Any) -> str:
    try:
        return f"{int(v):,}"
    except Exception:
        return str(v) if v is not None else "-"


def _fmt_raw(raw: Any) -> str:
    """Q16.8 raw plus its real value: diffable without float drift in the raw column."""
    return f"{int(raw)} ({int(raw) / Q16_8.scale:.6f})"


_env = Environment(undefined=StrictUndefined, trim_blocks=True, lstrip_blocks=True, keep_trailing_newline=True)
_env.filters.update(ms=_fmt_ms, pct=_fmt_pct, num=_fmt_int, raw=_fmt_raw)

TRACE_BLOCK = """\
[{{ title }}]
mode            {{ t.mode }}
frames          {{ t.frames }}
period_ms       {{ t.period_ms | ms }}
fps             {{ "%.2f" | format(t.fps) }}
latency_ms      {{ t.latency_ms | ms }}
binding_stage   {{ t.binding_stage }}
held_ms         {{ t.held_ms | ms }}
stalled_ms      {{ t.stalled_ms | ms }}
"""

SUMMARY_TEMPLATE = _env.from_string("""\
evhop run summary
=================
frames          {{ frames }}
events_accepted {{ collector.events_accepted | num }}
events_dropped  {{ collector.events_dropped | num }}
degenerate      {{ degenerate }}

[compute]
macs_performed  {{ stats.macs_performed | num }}
macs_dense      {{ stats.macs_dense_equivalent | num }}
skipped_macs    {{ stats.skipped_macs | num }}
savings         {{ stats.savings_ratio | pct }}
cycles@{{ mac_units }}     {{ stats.compute_cycles(mac_units) | num }}

{% for title, t in traces %}
""" + TRACE_BLOCK + """
{% endfor %}
{% if speedup is not none %}
speedup         {{ "%.4f" | format(speedup) }} ({{ speedup | pct }})
{% else %}
speedup         -
{% endif %}
{% if labels %}

[classifications]
{% for label, n in labels %}
{{ "%-15s" | format(label) }} {{ n }}
{% endfor %}
{% endif %}
""")

BENCH_TEMPLATE = _env.from_string("""\
evhop bench
===========
{% for title, t in traces %}
""" + TRACE_BLOCK + """
{% endfor %}
speedup         {{ "%.4f" | format(speedup) }} ({{ speedup | pct }})
peak_fps        {{ "%.2f" | format(peak_fps) }}
norm_cycles     {{ norm_cycles | num }}
""")

SCORES_TEMPLATE = _env.from_string("""\
{% for label, raw in scores %}
{{ "%-15s" | format(label) }} {{ raw | raw }}{% if loop.index0 == predicted %}  <-{% endif %}

{% endfor %}
""")


def _label_counts(result: EndToEndResult) -> List[tuple]:
    counts: Dict[str, int] = {}
    for f in result.frames:
        counts[f.label] = counts.get(f.label, 0) + 1
    return sorted(counts.items())


def render_summary(result: EndToEndResult, mac_units: int = 128) -> str:
    traces = []
    if result.trace is not None:
        traces.append(("pipelined", result.trace.summary()))
    if result.baseline is not None:
        traces.append(("baseline", result.baseline.summary()))
    degenerate = sum(1 for f in result.frames if int(f.degenerate) != 0)
    return SUMMARY_TEMPLATE.render(
        frames=len(result.frames), collector=result.collector, stats=result.stats, mac_units=mac_units,
        traces=traces, speedup=result.speedup, labels=_label_counts(result), degenerate=degenerate,
    )


def render_bench(pipelined: PipelineTrace, baseline: PipelineTrace, speedup: float, norm_cycles: int) -> str:
    return BENCH_TEMPLATE.render(
        traces=[("pipelined", pipelined.summary()), ("baseline", baseline.summary())],
        speedup=speedup, peak_fps=pipelined.fps, norm_cycles=norm_cycles,
    )


def render_scores(labels: List[str], scores_raw, predicted: Optional[int] = None) -> str:
    return SCORES_TEMPLATE.render(scores=list(zip(labels, [int(v) for v in scores_raw])),
                                  predicted=-1 if predicted is None else predicted)


def mac_stats_dict(stats: MacStats) -> Dict[str, Any]:
    return {
        "macs_performed": stats.macs_performed,
        "macs_dense_equivalent": stats.macs_dense_equivalent,
        "skipped_macs": stats.skipped_macs,
        "zero_skipped": stats.zero_skipped,
        "nnz_in": stats.nnz_in,
        "savings_ratio": round(stats.savings_ratio, 6),
    }
