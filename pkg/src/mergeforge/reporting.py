"""Score statistics, Markdown comparison tables, and histogram CSVs.

Conventions are fixed so every number is reproducible: the median of an
even-length list is the mean of the two middle values, the standard
deviation is the population form (divide by n), and intermediate sums
use exact integer arithmetic. Table cells show mean and std to 2
decimals; the median to 1 decimal, printed without the decimal point
when it lands on an integer (a median of 10.0 renders as "10").
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

__all__ = [
    "ReportError",
    "ScoreStats",
    "compute_stats",
    "report_table",
    "histogram_csv",
    "emit_histogram",
    "stats_csv",
]

_BINS = 11  # integer scores 0..10


class ReportError(ValueError):
    """Empty or out-of-range score input."""


@dataclass(frozen=True)
class ScoreStats:
    median: float
    mean: float
    std: float
    n: int
    histogram: tuple[int, ...]


def compute_stats(scores: Sequence[int]) -> ScoreStats:
    """Median, mean, population std, and 0..10 histogram of integer scores."""
    if not scores:
        raise ReportError("cannot compute statistics of an empty score list")
    histogram = [0] * _BINS
    for v in scores:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ReportError(f"score {v!r} is not an integer")
        if not 0 <= v <= 10:
            raise ReportError(f"score {v} outside [0, 10]")
        histogram[v] += 1
    n = len(scores)
    s = sum(scores)
    ss = sum(v * v for v in scores)
    mean = s / n
    std = math.sqrt((n * ss - s * s) / (n * n))
    ordered = sorted(scores)
    if n % 2:
        median = float(ordered[n // 2])
    else:
        median = (ordered[n // 2 - 1] + ordered[n // 2]) / 2
    return ScoreStats(median=median, mean=mean, std=std, n=n, histogram=tuple(histogram))


def _fmt_median(v: float) -> str:
    if v == int(v):
        return str(int(v))
    return f"{v:.1f}"


def _fmt2(v: float) -> str:
    return f"{v:.2f}"


def report_table(
    stats_by_model: Mapping[str, Mapping[str, ScoreStats]],
    judges: Sequence[str] | None = None,
) -> str:
    """Markdown table: one row per model, Median/Mean/Std per judge.

    Judge column order is `judges` when given, otherwise first appearance
    across the models. A model with no stats for some judge gets "-"
    cells.
    """
    if judges is None:
        seen: dict[str, None] = {}
        for per_judge in stats_by_model.values():
            for judge in per_judge:
                seen.setdefault(judge)
        judges = list(seen)
    header = ["Model"]
    for judge in judges:
        header += [f"{judge} Median", f"{judge} Mean", f"{judge} Std"]
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join([" --- "] * len(header)) + "|",
    ]
    for model, per_judge in stats_by_model.items():
        cells = [model]
        for judge in judges:
            stats = per_judge.get(judge)
            if stats is None:
                cells += ["-", "-", "-"]
            else:
                cells += [_fmt_median(stats.median), _fmt2(stats.mean), _fmt2(stats.std)]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def histogram_csv(stats: ScoreStats) -> str:
    lines = ["score,count"]
    lines += [f"{score},{count}" for score, count in enumerate(stats.histogram)]
    return "\n".join(lines) + "\n"


def emit_histogram(stats: ScoreStats, path: str) -> None:
    """Plot-ready CSV with one row per score 0..10."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(histogram_csv(stats))


def stats_csv(
    stats_by_model: Mapping[str, Mapping[str, ScoreStats]],
    judges: Sequence[str] | None = None,
) -> str:
    """Machine-precision statistics: model,judge,n,median,mean,std."""
    if judges is None:
        seen: dict[str, None] = {}
        for per_judge in stats_by_model.values():
            for judge in per_judge:
                seen.setdefault(judge)
        judges = list(seen)
    lines = ["model,judge,n,median,mean,std"]
    for model, per_judge in stats_by_model.items():
        for judge in judges:
            stats = per_judge.get(judge)
            if stats is not None:
                lines.append(
                    f"{model},{judge},{stats.n},"
                    f"{stats.median:.10g},{stats.mean:.10g},{stats.std:.10g}"
                )
    return "\n".join(lines) + "\n"
