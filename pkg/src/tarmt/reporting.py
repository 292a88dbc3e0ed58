"""Aggregation of run traces into analysis views.

Produces per-iteration quality/cost curves, before/after comparison tables
with signed deltas, and metric breakdowns bucketed by per-unit constraint
count. Everything here is pure aggregation over immutable inputs; output
formats are CSV (plot-ready), aligned text tables, and plain dicts for JSON.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .corpus import LEXICAL, Corpus
from .metrics import MetricReport, bleu, ccr, evaluate_pairs
from .pipeline import RevisionTrace


@dataclass
class IterationSummary:
    iteration: int
    ccr_percent: float | None
    bleu: float | None
    cumulative_cost: float
    cumulative_time_ms: float
    n_active_units: int


def _latest_hypothesis(trace: RevisionTrace, iteration: int) -> str:
    if not trace.iterations:
        return trace.final_text
    idx = min(iteration, len(trace.iterations) - 1)
    return trace.iterations[idx].hypothesis


def _traces_by_id(traces: list[RevisionTrace], corpus: Corpus) -> dict[str, RevisionTrace]:
    by_id = {t.unit_id: t for t in traces}
    missing = [u.id for u in corpus.units if u.id not in by_id]
    if missing:
        raise ValueError(f"traces missing for unit(s): {', '.join(missing[:10])}")
    return by_id


def iteration_curve(traces: list[RevisionTrace], corpus: Corpus) -> list[IterationSummary]:
    """Quality and cumulative cost after each iteration index.

    At index ``i`` every unit contributes its latest hypothesis at or before
    ``i`` (units that stopped early keep contributing their final text), so
    the last summary row reproduces the overall corpus metrics.
    """
    by_id = _traces_by_id(traces, corpus)
    max_index = max((len(t.iterations) - 1 for t in traces), default=0)
    references = [u.reference_text for u in corpus.units]
    have_refs = all(r is not None for r in references) and bool(corpus.units)
    lexical = corpus.constraint_kind == LEXICAL and corpus.total_constraints > 0

    summaries = []
    for i in range(max_index + 1):
        finals = [_latest_hypothesis(by_id[u.id], i) for u in corpus.units]
        cost = 0.0
        time_ms = 0.0
        active = 0
        for trace in by_id.values():
            for record in trace.iterations[: i + 1]:
                cost += record.usage.cost_currency_units
                time_ms += record.latency_ms
            if len(trace.iterations) > i:
                active += 1
        summaries.append(
            IterationSummary(
                iteration=i,
                ccr_percent=ccr(zip(corpus.units, finals)) if lexical else None,
                bleu=bleu(finals, references, corpus.units[0].tgt_lang) if have_refs else None,
                cumulative_cost=cost,
                cumulative_time_ms=time_ms,
                n_active_units=active,
            )
        )
    return summaries


def format_iteration_table(summaries: list[IterationSummary]) -> str:
    """Aligned per-iteration table: one IterationN row with metric and cost columns."""
    header = f"{'':12s} {'CCR%':>8s} {'BLEU':>8s} {'Cost':>10s} {'Time(ms)':>12s} {'Active':>8s}"
    lines = [header]
    for s in summaries:
        ccr_cell = f"{s.ccr_percent:.1f}" if s.ccr_percent is not None else "-"
        bleu_cell = f"{s.bleu:.1f}" if s.bleu is not None else "-"
        lines.append(
            f"Iteration{s.iteration:<3d} {ccr_cell:>8s} {bleu_cell:>8s} "
            f"{s.cumulative_cost:>10.2f} {s.cumulative_time_ms:>12.1f} "
            f"{s.n_active_units:>8d}"
        )
    return "\n".join(lines)


def write_curve_csv(summaries: list[IterationSummary], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iteration", "ccr_percent", "bleu", "cumulative_cost", "cumulative_time_ms", "n_active_units"]
        )
        for s in summaries:
            writer.writerow(
                [
                    s.iteration,
                    "" if s.ccr_percent is None else f"{s.ccr_percent:.4f}",
                    "" if s.bleu is None else f"{s.bleu:.4f}",
                    f"{s.cumulative_cost:.6f}",
                    f"{s.cumulative_time_ms:.3f}",
                    s.n_active_units,
                ]
            )


def bucket_by_constraint_count(
    traces: list[RevisionTrace],
    corpus: Corpus,
    buckets: list[int],
) -> dict[int, MetricReport | None]:
    """Per-bucket metrics over units grouped by their constraint count.

    ``buckets`` lists the exact constraint counts of interest (ascending);
    buckets with no units map to None.
    """
    if buckets != sorted(buckets):
        raise ValueError("buckets must be sorted ascending")
    by_id = _traces_by_id(traces, corpus)
    reports: dict[int, MetricReport | None] = {}
    for k in buckets:
        units = tuple(u for u in corpus.units if u.k == k)
        if not units:
            reports[k] = None
            continue
        sub = Corpus(units, name=f"{corpus.name}[k={k}]", constraint_kind=corpus.constraint_kind)
        finals = [by_id[u.id].final_text for u in units]
        reports[k] = evaluate_pairs(sub, finals)
    return reports


def delta_report(before: MetricReport, after: MetricReport) -> str:
    """Before/after metric table with signed one-decimal deltas.

    Both reports must describe the same corpus (name and unit count).
    """
    if before.corpus_name != after.corpus_name or before.n_units != after.n_units:
        raise ValueError(
            f"reports describe different corpora: {before.corpus_name!r} "
            f"({before.n_units} units) vs {after.corpus_name!r} ({after.n_units} units)"
        )
    rows = []
    for label, b, a in (
        ("BLEU", before.bleu, after.bleu),
        ("CCR%", before.ccr_percent, after.ccr_percent),
        ("SAR%", before.sar_percent, after.sar_percent),
        ("SMR%", before.smr_percent, after.smr_percent),
    ):
        if b is None and a is None:
            continue
        b_cell = f"{b:.1f}" if b is not None else "-"
        if a is None:
            rows.append((label, b_cell, "-"))
        elif b is None:
            rows.append((label, b_cell, f"{a:.1f}"))
        else:
            rows.append((label, b_cell, f"{a:.1f} ({a - b:+.1f})"))
    for name in sorted(set(before.external_scores) | set(after.external_scores)):
        b = before.external_scores.get(name)
        a = after.external_scores.get(name)
        b_cell = f"{b:.1f}" if b is not None else "-"
        if a is not None and b is not None:
            rows.append((name, b_cell, f"{a:.1f} ({a - b:+.1f})"))
        else:
            rows.append((name, b_cell, f"{a:.1f}" if a is not None else "-"))
    width = max((len(r[0]) for r in rows), default=6)
    lines = [f"{'Metric':<{width}s}  {'Before':>8s}  After"]
    for label, b_cell, a_cell in rows:
        lines.append(f"{label:<{width}s}  {b_cell:>8s}  {a_cell}")
    return "\n".join(lines)
