"""Corpus evaluation, aggregate reports and quality-latency curves."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

from ..ctc import EOS
from ..policy import run_offline_inference, run_simul_inference, run_waitk_inference
from .bleu import corpus_bleu, exact_match
from .latency import trace_metrics

LATENCY_FIELDS = ["AL", "AP", "DAL", "StartOffset", "EndOffset", "LAAL", "ATD"]
CA_FIELDS = [f"{k}_CA" for k in LATENCY_FIELDS]
STREAM_FIELDS = ["NumChunks", "Discontinuity_Sum", "Discontinuity_Ave", "Discontinuity_Num",
                 "Discontinuity_Sum_CA", "Discontinuity_Ave_CA", "Discontinuity_Num_CA", "RTF"]
QUALITY_FIELDS = ["unit_bleu", "text_bleu", "unit_exact_match"]
REPORT_FIELDS = ["mode", "C", "k", "n_samples", "n_empty"] + QUALITY_FIELDS + LATENCY_FIELDS + CA_FIELDS + STREAM_FIELDS


@dataclass
class MetricsReport:
    mode: str
    C: int | None = None
    k: int | None = None
    n_samples: int = 0
    n_empty: int = 0  # samples with no output frames; excluded from latency means
    quality: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    def flat(self) -> dict:
        row = {"mode": self.mode, "C": "inf" if self.C is None and self.mode != "waitk" else self.C,
               "k": self.k, "n_samples": self.n_samples, "n_empty": self.n_empty}
        row.update(self.quality)
        row.update(self.metrics)
        return {k: row.get(k) for k in REPORT_FIELDS}

    def to_json(self) -> str:
        return json.dumps(self.flat(), sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        return rows_to_csv([self.flat()])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in REPORT_FIELDS])
    return buf.getvalue()


def aggregate(per_trace: list[dict]) -> dict:
    """Arithmetic mean of each metric over traces."""
    if not per_trace:
        return {k: math.nan for k in LATENCY_FIELDS + CA_FIELDS + STREAM_FIELDS}
    keys = per_trace[0].keys()
    return {k: sum(m[k] for m in per_trace) / len(per_trace) for k in keys}


def strip_eos(tokens) -> list:
    return [t for t in tokens if t != EOS]


def run_one(model, sample, mode: str, C: int | None = None, k: int | None = None, clock=None):
    if mode == "offline":
        return run_offline_inference(model, sample.x, clock=clock, ref_units=sample.u)
    if mode == "simul":
        return run_simul_inference(model, sample.x, C, clock=clock, ref_units=sample.u)
    if mode == "waitk":
        return run_waitk_inference(model, sample.x, k, clock=clock, ref_units=sample.u)
    raise ValueError(f"unknown mode {mode!r}")


def evaluate_corpus(model, samples, mode: str, C: int | None = None, k: int | None = None, clock=None):
    """Returns (MetricsReport, list of InferenceResult)."""
    if mode == "waitk" and k is None:
        raise ValueError("waitk needs k")
    if mode != "waitk" and k is not None:
        raise ValueError("k is only valid with waitk")
    results = [run_one(model, s, mode, C, k, clock) for s in samples]
    per = [trace_metrics(r.trace) for r in results if r.trace.t]
    quality = {
        "unit_bleu": corpus_bleu([r.u for r in results], [s.u for s in samples]),
        "text_bleu": corpus_bleu([strip_eos(r.y) for r in results], [strip_eos(s.y) for s in samples]),
        "unit_exact_match": exact_match([r.u for r in results], [s.u for s in samples]),
    }
    report = MetricsReport(mode=mode, C=C, k=k, n_samples=len(samples), n_empty=len(results) - len(per),
                           quality=quality, metrics=aggregate(per))
    return report, results


def parse_grid(text: str) -> list[int | None]:
    out = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        if tok in ("inf", "∞", "none"):
            out.append(None)
        else:
            c = int(tok)
            if c < 1:
                raise ValueError(f"chunk size must be >= 1, got {c}")
            out.append(c)
    if not out:
        raise ValueError("empty grid")
    return out


def quality_latency_curve(model, samples, grid, clock=None) -> list[MetricsReport]:
    """One simultaneous-mode report per chunk size, sorted by ascending mean AL."""
    if not grid:
        raise ValueError("empty grid")
    reports = [evaluate_corpus(model, samples, "simul", C=c, clock=clock)[0] for c in grid]
    return sorted(reports, key=lambda r: (r.metrics["AL"], math.inf if r.C is None else r.C))


def curve_plot_data(reports: list[MetricsReport]) -> dict:
    return {
        "C": ["inf" if r.C is None else r.C for r in reports],
        "ideal": [[r.metrics["AL"], r.quality["unit_bleu"]] for r in reports],
        "computation_aware": [[r.metrics["AL_CA"], r.quality["unit_bleu"]] for r in reports],
    }
