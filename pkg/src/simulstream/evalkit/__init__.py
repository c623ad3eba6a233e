from .bleu import corpus_bleu, exact_match, ngram_counts
from .latency import (
    TraceError,
    average_lagging,
    average_proportion,
    average_token_delay,
    compute_ca_metrics,
    compute_latency_metrics,
    compute_streaming_degree,
    differentiable_average_lagging,
    discontinuity,
    trace_metrics,
)
from .report import (
    REPORT_FIELDS,
    MetricsReport,
    aggregate,
    curve_plot_data,
    evaluate_corpus,
    parse_grid,
    quality_latency_curve,
    rows_to_csv,
)

__all__ = [
    "REPORT_FIELDS", "MetricsReport", "TraceError", "aggregate", "average_lagging", "average_proportion",
    "average_token_delay", "compute_ca_metrics", "compute_latency_metrics", "compute_streaming_degree",
    "corpus_bleu", "curve_plot_data", "differentiable_average_lagging", "discontinuity", "evaluate_corpus",
    "exact_match", "ngram_counts", "parse_grid", "quality_latency_curve", "rows_to_csv", "trace_metrics",
]
