"""Latency and streaming-degree metrics over emission traces.

Conventions: times are milliseconds; ``t[i]`` is the emission time of output
frame i+1; |X| is the source duration in ms and |S| counts output frames, so
(i-1)*|X|/|S| is the ideal delay of frame i.  AL uses the reference output
length when the trace carries one, LAAL uses max(reference, emitted), and
every other metric uses the emitted length.
"""

from __future__ import annotations

import math
from typing import Sequence

from ..policy import EmissionTrace

LATENCY_KEYS = ["AL", "AP", "DAL", "StartOffset", "EndOffset", "LAAL", "ATD"]
STREAMING_KEYS = ["NumChunks", "Discontinuity_Sum", "Discontinuity_Ave", "Discontinuity_Num", "RTF"]


class TraceError(ValueError):
    pass


def average_lagging(t: Sequence[float], x_ms: float, s_len: float) -> float:
    """tau is the first frame emitted at or after the end of the source (|t| if none)."""
    tau = next((i + 1 for i, ti in enumerate(t) if ti >= x_ms), len(t))
    rate = x_ms / s_len
    return sum(t[i] - i * rate for i in range(tau)) / tau


def average_proportion(t: Sequence[float], x_ms: float) -> float:
    return sum(t) / (x_ms * len(t))


def differentiable_average_lagging(t: Sequence[float], x_ms: float) -> float:
    n = len(t)
    rate = x_ms / n
    total = 0.0
    prev = None
    for i, ti in enumerate(t):
        cur = ti if prev is None else max(ti, prev + rate)
        total += cur - i * rate
        prev = cur
    return total / n


def average_token_delay(t: Sequence[float], x_ms: float, frame_ms: float) -> float:
    """Output frame i is paired with the input frame at cumulative position i*|X|/|S|;
    its end time is the reference moment."""
    n = len(t)
    total = 0.0
    for i, ti in enumerate(t, start=1):
        pos = i * x_ms / n
        xi = min(math.ceil(pos / frame_ms - 1e-9) * frame_ms, x_ms)
        total += ti - xi
    return total / n


def _latency(t: Sequence[float], trace: EmissionTrace) -> dict:
    if not t:
        raise TraceError("trace has no output frames")
    if trace.x_ms <= 0:
        raise TraceError("source duration must be positive")
    x = trace.x_ms
    n = len(t)
    ref = trace.ref_frames or n
    return {
        "AL": average_lagging(t, x, ref),
        "AP": average_proportion(t, x),
        "DAL": differentiable_average_lagging(t, x),
        "StartOffset": float(t[0]),
        "EndOffset": float(t[-1] - x),
        "LAAL": average_lagging(t, x, max(ref, n)),
        "ATD": average_token_delay(t, x, trace.frame_ms),
    }


def compute_latency_metrics(trace: EmissionTrace) -> dict:
    return _latency(trace.t, trace)


def compute_ca_metrics(trace: EmissionTrace) -> dict:
    if trace.t_ca is None or len(trace.t_ca) != len(trace.t):
        raise TraceError("trace lacks a computation-aware timestamp per output frame")
    return {f"{k}_CA": v for k, v in _latency(trace.t_ca, trace).items()}


def discontinuity(segments: Sequence[tuple[float, float]]) -> dict:
    """Silence gaps on the playback timeline.

    ``segments`` are (emission time, duration) in emission order.  A segment
    starts playing at max(emission, end of previous playback); a gap opens
    when it is emitted after the previous playback has ended.
    """
    gaps = []
    end = None
    for emit, dur in segments:
        if end is not None and emit > end:
            gaps.append(emit - end)
        start = emit if end is None else max(emit, end)
        end = start + dur
    total = float(sum(gaps))
    return {"Sum": total, "Num": len(gaps), "Ave": total / len(gaps) if gaps else 0.0}


def compute_streaming_degree(trace: EmissionTrace) -> dict:
    if not trace.t:
        raise TraceError("trace has no output frames")
    segs = [(s["emit_ms"], s["length"] * trace.unit_ms) for s in trace.segments]
    segs_ca = [(s["emit_ca_ms"], s["length"] * trace.unit_ms) for s in trace.segments]
    d = discontinuity(segs)
    d_ca = discontinuity(segs_ca)
    return {
        "NumChunks": len(trace.segments),
        "Discontinuity_Sum": d["Sum"], "Discontinuity_Ave": d["Ave"], "Discontinuity_Num": d["Num"],
        "Discontinuity_Sum_CA": d_ca["Sum"], "Discontinuity_Ave_CA": d_ca["Ave"], "Discontinuity_Num_CA": d_ca["Num"],
        "RTF": trace.t[-1] / trace.x_ms,
    }


def trace_metrics(trace: EmissionTrace) -> dict:
    out = compute_latency_metrics(trace)
    out.update(compute_ca_metrics(trace))
    out.update(compute_streaming_degree(trace))
    return out
