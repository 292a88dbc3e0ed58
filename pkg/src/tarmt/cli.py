"""Command-line entry point wiring corpora, backends, runs, and reports.

Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error,
4 partial failure (some units failed on the backend, others completed).
All randomness flows from an explicit ``--seed`` (default 0, never
time-derived); every output artifact embeds the tool version and a config
hash so deterministic runs are reproducible bit for bit.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .corpus import (
    Corpus,
    CorpusFormatError,
    load_corpus,
    subsample_constraints,
    validate_corpus,
    write_corpus,
)
from .gateway import (
    BackendConfig,
    ChatGateway,
    GatewayError,
    HttpBackend,
    MemoTrapBackend,
    ReplayBackend,
    load_replay_file,
)
from .memo_trap import MemoTrapParams
from .metrics import MetricReport, evaluate_traces, external_mean, ingest_external
from .pipeline import (
    MODE_NMT_SEEDED,
    STOP_BACKEND_ERROR,
    RevisionPipeline,
    RunConfig,
    read_traces,
    run_meta,
    write_traces,
)
from .prompting import (
    BUILTIN_TEMPLATES,
    DEFAULT_ENSEMBLE_IDS,
    EnsemblePolicy,
    load_template_dir,
)
from .reporting import (
    bucket_by_constraint_count,
    delta_report,
    format_iteration_table,
    iteration_curve,
    write_curve_csv,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3
EXIT_PARTIAL = 4

DEFAULT_CACHE_DIR = ".tarmt-cache"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_corpus_arg(parser, *, required=True):
    parser.add_argument("--corpus", required=required, help="corpus file")
    parser.add_argument(
        "--format",
        default="jsonl",
        choices=["jsonl", "dinu_tsv", "wmt21_tt", "lxm_json"],
        help="corpus file format (default: canonical jsonl)",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="tarmt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tarmt {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("import", help="convert an upstream corpus file to canonical JSONL")
    p.add_argument("--input", required=True)
    p.add_argument(
        "--format",
        required=True,
        choices=["jsonl", "dinu_tsv", "wmt21_tt", "lxm_json"],
    )
    p.add_argument("--output", required=True)
    p.add_argument("--name", default=None, help="corpus name (default: file stem)")
    p.add_argument("--src-lang", default=None)
    p.add_argument("--tgt-lang", default=None)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("validate", help="report corpus problems")
    _add_corpus_arg(p)
    p.add_argument(
        "--require-constraints",
        action="store_true",
        help="flag lexical units without constraints",
    )
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("subsample", help="keep exactly k constraints per unit")
    _add_corpus_arg(p)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_subsample)

    p = sub.add_parser("run", help="run the translate-and-revise pipeline")
    _add_corpus_arg(p)
    p.add_argument("--out", required=True, help="traces output (JSONL)")
    p.add_argument("--metrics-out", default=None, help="metric report JSON (default: OUT.metrics.json)")
    backend = p.add_argument_group("backend")
    backend.add_argument("--backend-config", default=None, help="HTTP backend config JSON")
    backend.add_argument(
        "--mock", choices=["memo-trap", "replay"], default=None, help="use a mock backend"
    )
    backend.add_argument("--replay-file", default=None, help="JSONL fingerprint/response table")
    backend.add_argument("--override-prob", type=float, default=0.8, help="memo-trap override probability")
    backend.add_argument("--fix-per-revision", type=int, default=1, help="memo-trap fixes per revision")
    run_opts = p.add_argument_group("run options")
    run_opts.add_argument("--mode", choices=["llm-translate", "nmt-seeded"], default="llm-translate")
    run_opts.add_argument("--hypotheses", default=None, help="seed hypotheses (TSV id<TAB>text or JSONL)")
    run_opts.add_argument("--max-iters", type=int, default=3)
    run_opts.add_argument("--seed", type=int, default=0)
    run_opts.add_argument(
        "--ensemble",
        default="none",
        help="'none' (fixed standard template), 'default' (built-in paraphrases, "
        "random per round), or a comma-separated template id list",
    )
    run_opts.add_argument(
        "--ablation",
        choices=["standard", "ablation_no_uncompleted", "ablation_no_original", "ablation_flagged_only"],
        default="standard",
        help="reviser input variant",
    )
    run_opts.add_argument("--translate-template", default="translate-standard")
    run_opts.add_argument("--templates", default=None, help="directory of custom templates")
    run_opts.add_argument("--parallel", type=int, default=1)
    run_opts.add_argument("--zero-shot", action="store_true", help="drop the one-shot demonstration")
    run_opts.add_argument(
        "--llm-detection",
        action="store_true",
        help="experimental: backend-prompted constraint verdicts instead of rules",
    )
    run_opts.add_argument("--no-cache", action="store_true")
    run_opts.add_argument("--cache-dir", default=DEFAULT_CACHE_DIR)
    run_opts.add_argument("--resume", action="store_true", help="skip units already traced under this config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", help="compute corpus metrics from traces")
    _add_corpus_arg(p)
    p.add_argument("--traces", required=True)
    p.add_argument("--xml", action="store_true", help="XML-token BLEU plus SAR/SMR (structural corpora)")
    p.add_argument(
        "--external",
        action="append",
        default=[],
        metavar="NAME=PATH",
        help="attach externally computed per-unit scores (two-column TSV)",
    )
    p.add_argument("--out", default=None, help="metric report JSON")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="analysis views over traces")
    _add_corpus_arg(p, required=False)
    p.add_argument("--traces", default=None)
    p.add_argument("--curve-csv", default=None, help="write the per-iteration curve as CSV")
    p.add_argument("--table", action="store_true", help="print the per-iteration table")
    p.add_argument("--buckets", default=None, help="comma-separated constraint counts, e.g. 1,2,3")
    p.add_argument("--buckets-out", default=None, help="bucket report JSON")
    p.add_argument(
        "--delta",
        nargs=2,
        metavar=("BEFORE", "AFTER"),
        default=None,
        help="print a before/after table from two metric report JSONs",
    )
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("print-templates", help="print built-in prompt templates for audit")
    p.add_argument("--id", default=None, help="print only this template")
    p.set_defaults(func=cmd_print_templates)

    return parser


def cmd_import(args) -> int:
    corpus = load_corpus(
        args.input,
        args.format,
        src_lang=args.src_lang,
        tgt_lang=args.tgt_lang,
        name=args.name,
    )
    write_corpus(corpus, args.output)
    print(
        f"imported {len(corpus)} unit(s), {corpus.total_constraints} constraint(s) "
        f"[{corpus.constraint_kind}] -> {args.output}"
    )
    return EXIT_OK


def cmd_validate(args) -> int:
    corpus = load_corpus(args.corpus, "jsonl")
    issues = validate_corpus(corpus, require_constraints=args.require_constraints)
    for issue in issues:
        print(f"{issue.code}: {issue.unit_id}: {issue.message}")
    if issues:
        print(f"{len(issues)} issue(s) found")
        return EXIT_DATA
    print("corpus is clean")
    return EXIT_OK


def cmd_subsample(args) -> int:
    corpus = load_corpus(args.corpus, "jsonl")
    sampled = subsample_constraints(corpus, args.k, args.seed)
    write_corpus(sampled, args.output)
    print(f"kept {len(sampled)} unit(s) with exactly {args.k} constraint(s) -> {args.output}")
    return EXIT_OK


def _build_backend(args):
    if args.backend_config and args.mock:
        raise ValueError("choose either --backend-config or --mock, not both")
    if args.backend_config:
        config = BackendConfig.from_file(args.backend_config)
        return HttpBackend(config), config
    if args.mock == "replay":
        if not args.replay_file:
            raise ValueError("--mock replay needs --replay-file")
        return ReplayBackend(load_replay_file(args.replay_file)), None
    if args.mock == "memo-trap":
        params = MemoTrapParams(args.override_prob, args.fix_per_revision, args.seed)
        return MemoTrapBackend(params), None
    raise ValueError("no backend selected: pass --backend-config or --mock")


def _build_ensemble(args) -> EnsemblePolicy:
    if args.ensemble == "none":
        return EnsemblePolicy(("revise-standard",), "fixed_single", args.seed)
    if args.ensemble == "default":
        return EnsemblePolicy(DEFAULT_ENSEMBLE_IDS, "random_per_iteration", args.seed)
    ids = tuple(t.strip() for t in args.ensemble.split(",") if t.strip())
    return EnsemblePolicy(ids, "random_per_iteration", args.seed)


def _load_hypotheses(path: str) -> dict[str, str]:
    hypotheses: dict[str, str] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.lstrip().startswith("{"):
                rec = json.loads(line)
                hypotheses[str(rec["id"])] = rec["text"]
            else:
                unit_id, _, text = line.partition("\t")
                if not text:
                    raise ValueError(f"{path}: line {lineno}: expected id<TAB>text")
                hypotheses[unit_id] = text
    return hypotheses


def cmd_run(args) -> int:
    corpus = load_corpus(args.corpus, args.format)
    backend, backend_config = _build_backend(args)
    gateway = ChatGateway(
        backend,
        cache_dir=None if args.no_cache else args.cache_dir,
        price_table=backend_config.price_table if backend_config else None,
        retry=backend_config.retry_policy if backend_config else None,
        rate_limit_per_s=backend_config.rate_limit_per_s if backend_config else 0.0,
    )
    config = RunConfig(
        max_iterations=args.max_iters,
        mode="nmt_seeded" if args.mode == "nmt-seeded" else "llm_translate",
        translate_template=args.translate_template,
        ensemble=_build_ensemble(args),
        ablation=args.ablation,
        one_shot=not args.zero_shot,
        llm_detection=args.llm_detection,
        parallelism=args.parallel,
    )
    templates = load_template_dir(args.templates) if args.templates else None
    pipeline = RevisionPipeline(gateway, config, templates)
    meta = run_meta(config, gateway.backend_id, corpus, args.seed)

    done: dict[str, object] = {}
    if args.resume and Path(args.out).exists():
        old_meta, old_traces = read_traces(args.out)
        if old_meta.get("config_hash") == meta["config_hash"]:
            done = {t.unit_id: t for t in old_traces}
            logger.info("resume: %d unit(s) already traced", len(done))
        else:
            logger.warning("resume: config hash changed; rerunning everything")

    pending = corpus if not done else _subset(corpus, done)
    if config.mode == MODE_NMT_SEEDED:
        if not args.hypotheses:
            raise ValueError("--mode nmt-seeded needs --hypotheses")
        new_traces = pipeline.revise_only(_load_hypotheses(args.hypotheses), pending)
    else:
        new_traces = pipeline.run_corpus(pending)

    by_id = dict(done)
    by_id.update({t.unit_id: t for t in new_traces})
    traces = [by_id[u.id] for u in corpus.units]
    write_traces(args.out, traces, meta)

    report = evaluate_traces(
        corpus, traces, xml_mode=corpus.constraint_kind == "structural"
    )
    metrics_path = args.metrics_out or f"{args.out}.metrics.json"
    Path(metrics_path).write_text(
        json.dumps({"meta": meta, "report": report.to_dict()}, ensure_ascii=False, indent=2, sort_keys=True)
        + "\n",
        encoding="utf-8",
    )
    _print_report_line(report)
    print(f"backend calls: {gateway.live_calls} live, {gateway.cached_hits} cached")
    print(f"traces -> {args.out}; metrics -> {metrics_path}")

    failures = sum(1 for t in traces if t.stop_reason == STOP_BACKEND_ERROR)
    if failures == len(traces) and traces:
        return EXIT_BACKEND
    if failures:
        print(f"warning: {failures}/{len(traces)} unit(s) failed on the backend", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def _subset(corpus: Corpus, done: dict) -> Corpus:
    remaining = tuple(u for u in corpus.units if u.id not in done)
    return Corpus(remaining, name=corpus.name, constraint_kind=corpus.constraint_kind)


def _print_report_line(report) -> None:
    cells = [f"corpus={report.corpus_name}", f"units={report.n_units}"]
    if report.bleu is not None:
        cells.append(f"BLEU={report.bleu:.1f}")
    if report.ccr_percent is not None:
        cells.append(f"CCR={report.ccr_percent:.1f}%")
    if report.sar_percent is not None:
        cells.append(f"SAR={report.sar_percent:.2f}%")
    if report.smr_percent is not None:
        cells.append(f"SMR={report.smr_percent:.2f}%")
    for name, value in sorted(report.external_scores.items()):
        cells.append(f"{name}={value:.4f}")
    print("  ".join(cells))


def cmd_evaluate(args) -> int:
    corpus = load_corpus(args.corpus, args.format)
    if args.xml and corpus.constraint_kind != "structural":
        raise ValueError("--xml requires a structural corpus (kind mismatch)")
    meta, traces = read_traces(args.traces)
    report = evaluate_traces(corpus, traces, xml_mode=args.xml)
    for spec_item in args.external:
        name, _, path = spec_item.partition("=")
        if not path:
            raise ValueError(f"--external expects NAME=PATH, got {spec_item!r}")
        scores = ingest_external(path, name)
        mean, _ = external_mean(scores, [u.id for u in corpus.units])
        report.external_scores[name] = mean
    _print_report_line(report)
    if args.out:
        payload = {
            "meta": {
                "tool_version": __version__,
                "corpus": corpus.name,
                "config_hash": meta.get("config_hash"),
                "backend_id": meta.get("backend_id"),
                "seed": meta.get("seed"),
            },
            "report": report.to_dict(),
        }
        Path(args.out).write_text(
            json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        print(f"report -> {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.delta:
        before = _load_report(args.delta[0])
        after = _load_report(args.delta[1])
        print(delta_report(before, after))
        if not (args.corpus and args.traces):
            return EXIT_OK
    if not (args.corpus and args.traces):
        raise ValueError("report needs --corpus and --traces (or --delta)")
    corpus = load_corpus(args.corpus, args.format)
    _, traces = read_traces(args.traces)
    summaries = iteration_curve(traces, corpus)
    if args.table or not (args.curve_csv or args.buckets):
        print(format_iteration_table(summaries))
    if args.curve_csv:
        write_curve_csv(summaries, args.curve_csv)
        print(f"curve -> {args.curve_csv}")
    if args.buckets:
        buckets = sorted(int(b) for b in args.buckets.split(","))
        reports = bucket_by_constraint_count(traces, corpus, buckets)
        payload = {
            str(k): (r.to_dict() if r is not None else None) for k, r in reports.items()
        }
        if args.buckets_out:
            Path(args.buckets_out).write_text(
                json.dumps(payload, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
                encoding="utf-8",
            )
            print(f"buckets -> {args.buckets_out}")
        else:
            for k in buckets:
                r = reports[k]
                if r is None:
                    print(f"k={k}: (empty)")
                else:
                    line = [f"k={k}: units={r.n_units}"]
                    if r.bleu is not None:
                        line.append(f"BLEU={r.bleu:.1f}")
                    if r.ccr_percent is not None:
                        line.append(f"CCR={r.ccr_percent:.1f}%")
                    print("  ".join(line))
    return EXIT_OK


def _load_report(path: str) -> MetricReport:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return MetricReport.from_dict(data["report"] if "report" in data else data)


def cmd_print_templates(args) -> int:
    for template in BUILTIN_TEMPLATES.values():
        if args.id and template.id != args.id:
            continue
        print(f"--- id={template.id} stage={template.stage} variant={template.variant}")
        print(template.body)
        print()
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except GatewayError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (CorpusFormatError, ValueError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
