"""Reporting: iteration curves, constraint-count buckets, delta tables."""

from __future__ import annotations

import csv
import math

import pytest

from tarmt.corpus import ConstraintPair, Corpus, TranslationUnit
from tarmt.gateway import ChatGateway, MemoTrapBackend
from tarmt.memo_trap import MemoTrapParams
from tarmt.metrics import MetricReport, evaluate_traces
from tarmt.pipeline import RevisionPipeline, RunConfig
from tarmt.reporting import (
    bucket_by_constraint_count,
    delta_report,
    format_iteration_table,
    iteration_curve,
    write_curve_csv,
)

from conftest import synthetic_lexical_corpus


def run_memo(corpus, override=0.8, fix=1, seed=0, max_iterations=6):
    gateway = ChatGateway(MemoTrapBackend(MemoTrapParams(override, fix, seed)))
    pipeline = RevisionPipeline(gateway, RunConfig(max_iterations=max_iterations))
    return pipeline.run_corpus(corpus)


class TestIterationCurve:
    def test_all_satisfied_at_zero_gives_flat_single_row(self):
        corpus = synthetic_lexical_corpus(4, 2)
        traces = run_memo(corpus, override=0.0)
        summaries = iteration_curve(traces, corpus)
        assert len(summaries) == 1
        assert summaries[0].ccr_percent == 100.0
        assert summaries[0].n_active_units == 4

    def test_planted_schedule(self):
        # every constraint overridden, one fixed per revision:
        # CCR at iteration i = 100 * min(k, i) / k over uniform-k units
        k = 3
        corpus = synthetic_lexical_corpus(5, k)
        traces = run_memo(corpus, override=1.0, fix=1)
        summaries = iteration_curve(traces, corpus)
        assert len(summaries) == k + 1
        for i, summary in enumerate(summaries):
            expected = 100.0 * min(k, i) / k
            assert summary.ccr_percent == pytest.approx(expected), i

    def test_cost_and_active_units_monotone(self):
        corpus = synthetic_lexical_corpus(10, 3)
        traces = run_memo(corpus, override=0.7, seed=3)
        summaries = iteration_curve(traces, corpus)
        costs = [s.cumulative_cost for s in summaries]
        assert costs == sorted(costs)
        actives = [s.n_active_units for s in summaries]
        assert actives == sorted(actives, reverse=True)
        assert actives[0] == 10

    def test_final_row_reproduces_overall_report(self):
        corpus = synthetic_lexical_corpus(8, 2)
        traces = run_memo(corpus, override=0.8, seed=5)
        summaries = iteration_curve(traces, corpus)
        overall = evaluate_traces(corpus, traces)
        assert summaries[-1].ccr_percent == pytest.approx(overall.ccr_percent)

    def test_trace_corpus_mismatch_rejected(self):
        corpus = synthetic_lexical_corpus(3, 1)
        traces = run_memo(corpus)
        with pytest.raises(ValueError, match="missing"):
            iteration_curve(traces[:-1], corpus)

    def test_table_layout(self):
        corpus = synthetic_lexical_corpus(3, 2)
        traces = run_memo(corpus, override=1.0)
        table = format_iteration_table(iteration_curve(traces, corpus))
        lines = table.splitlines()
        assert lines[1].startswith("Iteration0")
        assert lines[-1].startswith(f"Iteration{len(lines) - 2}")
        # cost column carries two decimals
        assert any(part.count(".") and len(part.split(".")[1]) == 2
                   for part in lines[1].split())

    def test_curve_csv(self, tmp_path):
        corpus = synthetic_lexical_corpus(3, 2)
        traces = run_memo(corpus, override=1.0)
        path = tmp_path / "curve.csv"
        write_curve_csv(iteration_curve(traces, corpus), path)
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][0] == "iteration"
        assert [r[0] for r in rows[1:]] == [str(i) for i in range(len(rows) - 1)]


class TestBuckets:
    def mixed_corpus(self):
        units = []
        for i in range(6):
            k = 1 + (i % 2)  # k alternates 1, 2
            pairs = tuple(
                ConstraintPair(f"s{i}_{j}", (f"目{i}标{j}的",)) for j in range(k)
            )
            units.append(
                TranslationUnit(f"m{i}", "en", "zh", f"source {i}", constraints=pairs)
            )
        return Corpus(tuple(units), name="mixed")

    def test_only_observed_buckets_populated(self):
        corpus = self.mixed_corpus()
        traces = run_memo(corpus, override=0.5)
        reports = bucket_by_constraint_count(traces, corpus, [1, 2, 3])
        assert reports[1] is not None and reports[2] is not None
        assert reports[3] is None

    def test_bucket_totals_reconcile_with_corpus(self):
        corpus = self.mixed_corpus()
        traces = run_memo(corpus, override=0.5)
        reports = bucket_by_constraint_count(traces, corpus, [1, 2])
        total = sum(r.n_constraints for r in reports.values() if r is not None)
        assert total == corpus.total_constraints
        units = sum(r.n_units for r in reports.values() if r is not None)
        assert units == len(corpus)

    def test_planted_flat_curve(self):
        # override 0 -> every bucket at CCR 100, independent of k
        corpus = self.mixed_corpus()
        traces = run_memo(corpus, override=0.0)
        reports = bucket_by_constraint_count(traces, corpus, [1, 2])
        assert reports[1].ccr_percent == 100.0
        assert reports[2].ccr_percent == 100.0

    def test_unsorted_buckets_rejected(self):
        corpus = self.mixed_corpus()
        traces = run_memo(corpus)
        with pytest.raises(ValueError, match="sorted"):
            bucket_by_constraint_count(traces, corpus, [2, 1])


class TestDeltaReport:
    def test_positive_delta_formatting(self):
        before = MetricReport("c", 10, 20, bleu=36.4, ccr_percent=92.6)
        after = MetricReport("c", 10, 20, bleu=35.9, ccr_percent=95.9)
        table = delta_report(before, after)
        assert "(+3.3)" in table
        assert "(-0.5)" in table

    def test_identical_reports_all_zero(self):
        report = MetricReport("c", 10, 20, bleu=40.0, ccr_percent=90.0)
        table = delta_report(report, report)
        assert table.count("(+0.0)") == 2

    def test_corpus_mismatch_rejected(self):
        a = MetricReport("c", 10, 20, bleu=40.0)
        b = MetricReport("other", 10, 20, bleu=41.0)
        with pytest.raises(ValueError, match="different corpora"):
            delta_report(a, b)

    def test_structural_metrics_included(self):
        before = MetricReport("c", 4, 4, sar_percent=99.95, smr_percent=99.50)
        after = MetricReport("c", 4, 4, sar_percent=100.00, smr_percent=99.75)
        table = delta_report(before, after)
        assert "SAR%" in table and "SMR%" in table
        assert "(+0.2)" in table  # 99.75 - 99.50 at one decimal

    def test_external_scores_included(self):
        before = MetricReport("c", 4, 4, bleu=40.0, external_scores={"comet": 87.4})
        after = MetricReport("c", 4, 4, bleu=40.0, external_scores={"comet": 87.4})
        table = delta_report(before, after)
        assert "comet" in table and "(+0.0)" in table


class TestConvergenceShape:
    def test_curve_rises_most_in_first_revision(self):
        # qualitative shape: the big jump happens at iteration 1
        corpus = synthetic_lexical_corpus(40, 3)
        traces = run_memo(corpus, override=0.8, fix=2, seed=2)
        summaries = iteration_curve(traces, corpus)
        gains = [
            summaries[i + 1].ccr_percent - summaries[i].ccr_percent
            for i in range(len(summaries) - 1)
        ]
        assert gains[0] == max(gains)
        assert all(g >= 0 for g in gains)
