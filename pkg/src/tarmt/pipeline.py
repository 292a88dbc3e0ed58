"""The translate-and-revise controller.

One unit flows through: initial translation (or ingestion of an externally
produced seed hypothesis), rule-based detection of uncompleted constraints,
then revision rounds until every constraint holds or the iteration budget is
spent. Every round is captured in a trace for metrics and auditing.

Unit executions are independent; a corpus run may fan out across threads and
always emits traces in corpus order.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

from . import __version__
from .corpus import ConstraintPair, Corpus, TranslationUnit
from .detector import ConstraintStatus, DetectionResult, detect
from .gateway import (
    ChatGateway,
    ChatRequest,
    GatewayError,
    Usage,
    ZERO_USAGE,
    make_request_tag,
)
from .prompting import (
    ABLATION_TEMPLATE_IDS,
    BUILTIN_TEMPLATES,
    EnsemblePolicy,
    PromptTemplate,
    RenderedPrompt,
    VARIANT_STANDARD,
    parse_verdict,
    render_revise,
    render_translate,
    render_verdict,
    select_template,
)

logger = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1

STOP_ALL_SATISFIED = "all_satisfied"
STOP_BUDGET_EXHAUSTED = "budget_exhausted"
STOP_ZERO_CONSTRAINTS = "zero_constraints"
STOP_BACKEND_ERROR = "backend_error"

MODE_LLM_TRANSLATE = "llm_translate"
MODE_NMT_SEEDED = "nmt_seeded"


class PipelineError(ValueError):
    pass


def _add_usage(a: Usage, b: Usage) -> Usage:
    if b == ZERO_USAGE:
        return a
    return Usage(
        a.prompt_tokens + b.prompt_tokens,
        a.completion_tokens + b.completion_tokens,
        a.cost_currency_units + b.cost_currency_units,
        a.estimated or b.estimated,
    )


@dataclass(frozen=True)
class RunConfig:
    """Knobs of one pipeline run.

    ``ablation`` selects the reviser input variant; anything other than
    ``standard`` overrides the ensemble with a single fixed template.
    """

    max_iterations: int = 3
    mode: str = MODE_LLM_TRANSLATE
    translate_template: str = "translate-standard"
    ensemble: EnsemblePolicy = field(
        default_factory=lambda: EnsemblePolicy(("revise-standard",))
    )
    ablation: str = VARIANT_STANDARD
    one_shot: bool = True
    llm_detection: bool = False
    case_sensitive: bool = False
    parallelism: int = 1
    max_output: int = 1024

    def __post_init__(self) -> None:
        if self.max_iterations < 0:
            raise PipelineError("max_iterations must be non-negative")
        if self.mode not in (MODE_LLM_TRANSLATE, MODE_NMT_SEEDED):
            raise PipelineError(f"unknown mode: {self.mode!r}")
        if self.ablation not in ABLATION_TEMPLATE_IDS:
            raise PipelineError(f"unknown ablation variant: {self.ablation!r}")
        if self.parallelism < 1:
            raise PipelineError("parallelism must be positive")


@dataclass(frozen=True)
class IterationRecord:
    index: int
    stage: str  # translate | seed | revise
    template_id: str
    hypothesis: str
    detection: DetectionResult
    usage: Usage
    latency_ms: float


@dataclass(frozen=True)
class RevisionTrace:
    unit_id: str
    iterations: tuple[IterationRecord, ...]
    final_text: str
    final_detection: DetectionResult
    stop_reason: str


def config_hash(config: RunConfig, backend_id: str, corpus_name: str) -> str:
    payload = json.dumps(
        {"config": asdict(config), "backend_id": backend_id, "corpus": corpus_name},
        ensure_ascii=False,
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class RevisionPipeline:
    """Runs the translate-detect-revise loop against a configured gateway."""

    def __init__(
        self,
        gateway: ChatGateway,
        config: RunConfig,
        templates: Mapping[str, PromptTemplate] | None = None,
    ):
        self.gateway = gateway
        self.config = config
        self.templates = dict(BUILTIN_TEMPLATES)
        if templates:
            self.templates.update(templates)
        if config.ablation != VARIANT_STANDARD:
            self._ensemble = EnsemblePolicy(
                (ABLATION_TEMPLATE_IDS[config.ablation],), "fixed_single", config.ensemble.seed
            )
        else:
            self._ensemble = config.ensemble
        for template_id in (config.translate_template, *self._ensemble.template_ids):
            if template_id not in self.templates:
                raise PipelineError(f"unknown template id: {template_id!r}")

    def _template(self, template_id: str) -> PromptTemplate:
        return self.templates[template_id]

    def _call(self, unit: TranslationUnit, stage: str, iteration: int, prompt: RenderedPrompt):
        request = ChatRequest(
            model=self.gateway.model,
            messages=prompt.messages,
            temperature=0.0,
            max_output=self.config.max_output,
            request_tag=make_request_tag(unit.id, stage, iteration),
        )
        return self.gateway.complete(request)

    def _detect(self, unit: TranslationUnit, hypothesis: str) -> DetectionResult:
        return detect(unit, hypothesis, case_sensitive=self.config.case_sensitive)

    def _observe(
        self, unit: TranslationUnit, hypothesis: str, iteration: int
    ) -> tuple[DetectionResult, Usage, float]:
        """Detection recorded for a hypothesis: rule-based by default, or the
        experimental backend-prompted verdict when llm_detection is on."""
        if not self.config.llm_detection or not unit.constraints:
            return self._detect(unit, hypothesis), ZERO_USAGE, 0.0
        prompt = render_verdict(unit, hypothesis)
        response = self._call(unit, "verify", iteration, prompt)
        return parse_verdict(response.text, unit), response.usage, response.latency_ms

    def run_unit(self, unit: TranslationUnit) -> RevisionTrace:
        """Run the full loop for one unit; backend failures truncate the trace."""
        records: list[IterationRecord] = []
        stop = STOP_BUDGET_EXHAUSTED
        try:
            records.append(self._initial_record(unit))
            if not unit.constraints:
                stop = STOP_ZERO_CONSTRAINTS
            else:
                stop = self._revision_loop(unit, records)
        except GatewayError as exc:
            logger.error("unit %s: backend failure: %s", unit.id, exc)
            stop = STOP_BACKEND_ERROR
        final_text = records[-1].hypothesis if records else ""
        final_detection = (
            records[-1].detection if records else self._detect(unit, final_text)
        )
        return RevisionTrace(
            unit_id=unit.id,
            iterations=tuple(records),
            final_text=final_text,
            final_detection=final_detection,
            stop_reason=stop,
        )

    def _initial_record(self, unit: TranslationUnit) -> IterationRecord:
        if self.config.mode == MODE_NMT_SEEDED:
            if unit.seed_hypothesis is None:
                raise PipelineError(f"unit {unit.id!r} has no seed hypothesis")
            hypothesis = unit.seed_hypothesis
            detection, usage, latency = self._observe(unit, hypothesis, 0)
            return IterationRecord(0, "seed", "", hypothesis, detection, usage, latency)
        template_id = self.config.translate_template
        if not unit.constraints:
            # Constraint-free units take the plain prompt automatically.
            template_id = "translate-plain"
        prompt = render_translate(
            self._template(template_id), unit, one_shot=self.config.one_shot
        )
        response = self._call(unit, "translate", 0, prompt)
        detection, verify_usage, verify_latency = self._observe(unit, response.text, 0)
        return IterationRecord(
            0,
            "translate",
            template_id,
            response.text,
            detection,
            _add_usage(response.usage, verify_usage),
            response.latency_ms + verify_latency,
        )

    def _revision_loop(self, unit: TranslationUnit, records: list[IterationRecord]) -> str:
        while True:
            detection = records[-1].detection
            if detection.all_satisfied:
                return STOP_ALL_SATISFIED
            if len(records) - 1 >= self.config.max_iterations:
                return STOP_BUDGET_EXHAUSTED
            index = len(records)
            template_id = select_template(self._ensemble, index)
            prompt = render_revise(
                self._template(template_id),
                unit,
                records[-1].hypothesis,
                detection,
                one_shot=self.config.one_shot,
            )
            response = self._call(unit, "revise", index, prompt)
            new_detection, verify_usage, verify_latency = self._observe(
                unit, response.text, index
            )
            records.append(
                IterationRecord(
                    index,
                    "revise",
                    template_id,
                    response.text,
                    new_detection,
                    _add_usage(response.usage, verify_usage),
                    response.latency_ms + verify_latency,
                )
            )

    def run_corpus(self, corpus: Corpus) -> list[RevisionTrace]:
        """One trace per unit, in corpus order, with per-unit failure isolation."""
        if self.config.parallelism <= 1:
            return [self.run_unit(unit) for unit in corpus.units]
        with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
            return list(pool.map(self.run_unit, corpus.units))

    def revise_only(self, hypotheses: Mapping[str, str], corpus: Corpus) -> list[RevisionTrace]:
        """Apply the revision loop to externally produced hypotheses."""
        missing = [unit.id for unit in corpus.units if unit.id not in hypotheses]
        if missing:
            raise PipelineError(
                f"missing hypotheses for {len(missing)} unit(s): {', '.join(missing[:10])}"
            )
        seeded_units = tuple(
            replace(unit, seed_hypothesis=hypotheses[unit.id]) for unit in corpus.units
        )
        seeded = Corpus(seeded_units, name=corpus.name, constraint_kind=corpus.constraint_kind)
        seeded_config = replace(self.config, mode=MODE_NMT_SEEDED)
        seeded_pipeline = RevisionPipeline(self.gateway, seeded_config, self.templates)
        return seeded_pipeline.run_corpus(seeded)


def _pair_to_dict(pair: ConstraintPair) -> dict:
    return {"source": pair.source_form, "targets": list(pair.target_forms), "kind": pair.kind}


def _pair_from_dict(data: dict) -> ConstraintPair:
    return ConstraintPair(data["source"], tuple(data["targets"]), data.get("kind", "lexical"))


def _detection_to_dict(detection: DetectionResult) -> dict:
    return {
        "statuses": [
            {
                "pair": _pair_to_dict(s.pair),
                "satisfied": s.satisfied,
                "matched_form": s.matched_form,
                "match_offset": s.match_offset,
            }
            for s in detection.statuses
        ],
        "all_satisfied": detection.all_satisfied,
    }


def _detection_from_dict(data: dict) -> DetectionResult:
    statuses = tuple(
        ConstraintStatus(
            _pair_from_dict(s["pair"]),
            s["satisfied"],
            s.get("matched_form"),
            s.get("match_offset"),
        )
        for s in data["statuses"]
    )
    return DetectionResult.from_statuses(statuses)


def trace_to_dict(trace: RevisionTrace) -> dict:
    return {
        "record": "trace",
        "schema_version": TRACE_SCHEMA_VERSION,
        "unit_id": trace.unit_id,
        "iterations": [
            {
                "index": r.index,
                "stage": r.stage,
                "template_id": r.template_id,
                "hypothesis": r.hypothesis,
                "detection": _detection_to_dict(r.detection),
                "usage": {
                    "prompt_tokens": r.usage.prompt_tokens,
                    "completion_tokens": r.usage.completion_tokens,
                    "cost_currency_units": r.usage.cost_currency_units,
                    "estimated": r.usage.estimated,
                },
                "latency_ms": r.latency_ms,
            }
            for r in trace.iterations
        ],
        "final_text": trace.final_text,
        "final_detection": _detection_to_dict(trace.final_detection),
        "stop_reason": trace.stop_reason,
    }


def trace_from_dict(data: dict) -> RevisionTrace:
    iterations = tuple(
        IterationRecord(
            r["index"],
            r["stage"],
            r["template_id"],
            r["hypothesis"],
            _detection_from_dict(r["detection"]),
            Usage(
                r["usage"]["prompt_tokens"],
                r["usage"]["completion_tokens"],
                r["usage"]["cost_currency_units"],
                r["usage"].get("estimated", False),
            ),
            r["latency_ms"],
        )
        for r in data["iterations"]
    )
    return RevisionTrace(
        unit_id=data["unit_id"],
        iterations=iterations,
        final_text=data["final_text"],
        final_detection=_detection_from_dict(data["final_detection"]),
        stop_reason=data["stop_reason"],
    )


def run_meta(config: RunConfig, backend_id: str, corpus: Corpus, seed: int) -> dict:
    """Provenance block embedded in every run artifact."""
    return {
        "record": "meta",
        "schema_version": TRACE_SCHEMA_VERSION,
        "tool_version": __version__,
        "config_hash": config_hash(config, backend_id, corpus.name),
        "corpus": corpus.name,
        "backend_id": backend_id,
        "seed": seed,
    }


def write_traces(path: str | Path, traces: list[RevisionTrace], meta: dict) -> None:
    """Write traces as JSONL: one meta line, then one trace per line."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(meta, ensure_ascii=False, sort_keys=True))
        fh.write("\n")
        for trace in traces:
            fh.write(json.dumps(trace_to_dict(trace), ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def read_traces(path: str | Path) -> tuple[dict, list[RevisionTrace]]:
    meta: dict = {}
    traces: list[RevisionTrace] = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            data = json.loads(line)
            if data.get("record") == "meta":
                meta = data
            else:
                traces.append(trace_from_dict(data))
    return meta, traces
