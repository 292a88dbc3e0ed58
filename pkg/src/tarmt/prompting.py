"""Prompt templates for the translate and revise stages, plus the ensemble selector.

Templates are plain text with ``{placeholder}`` markers. Constraint pairs are
serialized as ``source -> target`` entries joined by ``"; "``; only the
primary target form is shown (alternatives exist for detection credit only).
Rendering is pure: the same inputs always produce byte-identical prompts.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass
from pathlib import Path

from .corpus import LEXICAL, STRUCTURAL, ConstraintPair, TranslationUnit
from .detector import (
    STRUCTURE_MISMATCH_FEEDBACK,
    ConstraintStatus,
    DetectionResult,
    detect_uncompleted,
)

STAGE_TRANSLATE = "translate"
STAGE_REVISE = "revise"

VARIANT_STANDARD = "standard"
VARIANT_PLAIN = "plain_no_constraints"
VARIANT_CODE_SWITCHING = "code_switching"
VARIANT_APPEND = "append"
VARIANT_NO_UNCOMPLETED = "ablation_no_uncompleted"
VARIANT_NO_ORIGINAL = "ablation_no_original"
VARIANT_FLAGGED_ONLY = "ablation_flagged_only"

_PLACEHOLDERS = (
    "src_lang",
    "tgt_lang",
    "source",
    "constraints",
    "current_translation",
    "uncompleted_constraints",
)
_TRANSLATE_ONLY = frozenset({"src_lang", "tgt_lang", "source", "constraints"})
_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(_PLACEHOLDERS) + r")\}")

_LANGUAGE_NAMES = {
    "en": "English",
    "zh": "Chinese",
    "de": "German",
    "ru": "Russian",
    "fr": "French",
    "es": "Spanish",
    "ja": "Japanese",
    "ko": "Korean",
    "it": "Italian",
    "pt": "Portuguese",
}


class PromptError(ValueError):
    pass


def language_name(code: str) -> str:
    """Human-readable language name for a code; unknown codes pass through."""
    primary = re.split(r"[-_]", code.strip().lower(), maxsplit=1)[0]
    return _LANGUAGE_NAMES.get(primary, code)


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    stage: str
    body: str
    variant: str = VARIANT_STANDARD

    def __post_init__(self) -> None:
        if self.stage not in (STAGE_TRANSLATE, STAGE_REVISE):
            raise PromptError(f"unknown stage: {self.stage!r}")
        if self.stage == STAGE_TRANSLATE:
            illegal = set(self.placeholders()) - _TRANSLATE_ONLY
            if illegal:
                raise PromptError(
                    f"template {self.id!r}: translate stage may not use "
                    f"{sorted(illegal)}"
                )

    def placeholders(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(_PLACEHOLDER_RE.findall(self.body)))


@dataclass(frozen=True)
class RenderedPrompt:
    template_id: str
    messages: tuple[tuple[str, str], ...]
    demonstration_included: bool

    @property
    def live_text(self) -> str:
        return self.messages[-1][1]


@dataclass(frozen=True)
class EnsemblePolicy:
    template_ids: tuple[str, ...]
    mode: str = "fixed_single"  # or "random_per_iteration"
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "template_ids", tuple(self.template_ids))
        if not self.template_ids:
            raise PromptError("ensemble policy needs at least one template id")
        if self.mode not in ("fixed_single", "random_per_iteration"):
            raise PromptError(f"unknown ensemble mode: {self.mode!r}")


TRANSLATE_STANDARD_BODY = (
    "Translate the sentence from {src_lang} to {tgt_lang}, ensuring the "
    "provided constraints are reflected in the translation. The constraints "
    "are given in no specific order. Only provide the translation result.\n"
    "Sentence: {source}\n"
    "Constraints: {constraints}\n"
    "Output:"
)

TRANSLATE_PLAIN_BODY = (
    "Translate the sentence from {src_lang} to {tgt_lang}. Only provide the "
    "translation result.\n"
    "Sentence: {source}\n"
    "Output:"
)

REVISE_STANDARD_BODY = (
    "Given a sentence in {src_lang}, its constraints, and its current "
    "translation in {tgt_lang}:\n"
    "Original {src_lang} sentence: {source}\n"
    "Constraints: {constraints}\n"
    "Current translation: {current_translation}\n"
    "Please provide a revised translation based on the following error "
    "message, ensuring that all the constraints are accurately reflected in "
    "the translation:\n"
    "Uncompleted constraints: {uncompleted_constraints}\n"
    "Revised translation result:"
)

REVISE_ALT_A_BODY = (
    "You are given a source sentence in {src_lang}, its full constraint "
    "list, and a draft {tgt_lang} translation that misses some required "
    "expressions.\n"
    "Original {src_lang} sentence: {source}\n"
    "Constraints: {constraints}\n"
    "Current translation: {current_translation}\n"
    "Uncompleted constraints: {uncompleted_constraints}\n"
    "Rewrite the translation so that every required expression above appears "
    "in it. Only provide the revised translation."
)

REVISE_ALT_B_BODY = (
    "Fix the {tgt_lang} translation below so that it satisfies all of its "
    "constraints.\n"
    "Sentence ({src_lang}): {source}\n"
    "Constraints: {constraints}\n"
    "Current translation: {current_translation}\n"
    "Constraints still missing from the translation: "
    "{uncompleted_constraints}\n"
    "Corrected translation:"
)

REVISE_NO_UNCOMPLETED_BODY = (
    "Given a sentence in {src_lang}, its constraints, and its current "
    "translation in {tgt_lang}:\n"
    "Original {src_lang} sentence: {source}\n"
    "Constraints: {constraints}\n"
    "Current translation: {current_translation}\n"
    "Please provide a revised translation, ensuring that all the constraints "
    "are accurately reflected in the translation:\n"
    "Revised translation result:"
)

REVISE_NO_ORIGINAL_BODY = (
    "Given a sentence in {src_lang} and its current translation in "
    "{tgt_lang}:\n"
    "Original {src_lang} sentence: {source}\n"
    "Current translation: {current_translation}\n"
    "Please provide a revised translation based on the following error "
    "message, ensuring that all the required expressions are accurately "
    "reflected in the translation:\n"
    "Uncompleted constraints: {uncompleted_constraints}\n"
    "Revised translation result:"
)

REVISE_FLAGGED_ONLY_BODY = (
    "Given a sentence in {src_lang} and its current translation in "
    "{tgt_lang}:\n"
    "Original {src_lang} sentence: {source}\n"
    "Current translation: {current_translation}\n"
    "The current translation fails to satisfy some constraints.\n"
    "Please provide a revised translation:\n"
    "Revised translation result:"
)

BUILTIN_TEMPLATES: dict[str, PromptTemplate] = {
    t.id: t
    for t in (
        PromptTemplate("translate-standard", STAGE_TRANSLATE, TRANSLATE_STANDARD_BODY),
        PromptTemplate("translate-plain", STAGE_TRANSLATE, TRANSLATE_PLAIN_BODY, VARIANT_PLAIN),
        PromptTemplate(
            "translate-code-switching", STAGE_TRANSLATE, TRANSLATE_PLAIN_BODY, VARIANT_CODE_SWITCHING
        ),
        PromptTemplate("translate-append", STAGE_TRANSLATE, TRANSLATE_PLAIN_BODY, VARIANT_APPEND),
        PromptTemplate("revise-standard", STAGE_REVISE, REVISE_STANDARD_BODY),
        PromptTemplate("revise-standard-alt-a", STAGE_REVISE, REVISE_ALT_A_BODY),
        PromptTemplate("revise-standard-alt-b", STAGE_REVISE, REVISE_ALT_B_BODY),
        PromptTemplate(
            "revise-no-uncompleted", STAGE_REVISE, REVISE_NO_UNCOMPLETED_BODY, VARIANT_NO_UNCOMPLETED
        ),
        PromptTemplate(
            "revise-no-original", STAGE_REVISE, REVISE_NO_ORIGINAL_BODY, VARIANT_NO_ORIGINAL
        ),
        PromptTemplate(
            "revise-flagged-only", STAGE_REVISE, REVISE_FLAGGED_ONLY_BODY, VARIANT_FLAGGED_ONLY
        ),
    )
}

DEFAULT_ENSEMBLE_IDS = ("revise-standard", "revise-standard-alt-a", "revise-standard-alt-b")

ABLATION_TEMPLATE_IDS = {
    VARIANT_STANDARD: "revise-standard",
    VARIANT_NO_UNCOMPLETED: "revise-no-uncompleted",
    VARIANT_NO_ORIGINAL: "revise-no-original",
    VARIANT_FLAGGED_ONLY: "revise-flagged-only",
}


def serialize_constraints(pairs: tuple[ConstraintPair, ...] | list[ConstraintPair]) -> str:
    """Render a constraint list for inclusion in a prompt."""
    if not pairs:
        return "(none)"
    parts = []
    for pair in pairs:
        if pair.kind == STRUCTURAL:
            parts.append("preserve all XML tags from the source sentence")
        else:
            parts.append(f"{pair.source_form} -> {pair.target_forms[0]}")
    return "; ".join(parts)


def serialize_uncompleted(pairs: tuple[ConstraintPair, ...] | list[ConstraintPair]) -> str:
    """Render the uncompleted-constraints block of a revise prompt."""
    parts = []
    for pair in pairs:
        if pair.kind == STRUCTURAL:
            parts.append(STRUCTURE_MISMATCH_FEEDBACK)
        else:
            parts.append(f"{pair.source_form} -> {pair.target_forms[0]}")
    return "; ".join(parts)


def _render_body(template: PromptTemplate, bindings: dict[str, str]) -> str:
    def substitute(match: re.Match) -> str:
        name = match.group(1)
        if name not in bindings:
            raise PromptError(
                f"template {template.id!r}: no binding for placeholder {name!r}"
            )
        return bindings[name]

    rendered = _PLACEHOLDER_RE.sub(substitute, template.body)
    leftover = _PLACEHOLDER_RE.search(rendered)
    if leftover:  # bound values must not smuggle placeholder markers back in
        raise PromptError(
            f"template {template.id!r}: residual placeholder {leftover.group(0)!r}"
        )
    return rendered


def _code_switch(unit: TranslationUnit) -> str:
    text = unit.source_text
    for pair in unit.constraints:
        if pair.kind != LEXICAL:
            continue
        text = re.sub(
            re.escape(pair.source_form), pair.target_forms[0], text, flags=re.IGNORECASE
        )
    return text


def _translate_source(template: PromptTemplate, unit: TranslationUnit) -> str:
    if template.variant == VARIANT_CODE_SWITCHING:
        return _code_switch(unit)
    if template.variant == VARIANT_APPEND:
        return f"{unit.source_text} {serialize_constraints(unit.constraints)}"
    return unit.source_text


@dataclass(frozen=True)
class TranslateDemo:
    unit: TranslationUnit
    answer: str


@dataclass(frozen=True)
class ReviseDemo:
    unit: TranslationUnit
    flawed: str
    answer: str


_DEMO_UNIT = TranslationUnit(
    id="demo",
    src_lang="en",
    tgt_lang="zh",
    source_text="The hospital opened a new clinic in Beijing last week.",
    constraints=(ConstraintPair("Beijing", ("北京",)),),
)

DEFAULT_TRANSLATE_DEMO = TranslateDemo(_DEMO_UNIT, "医院上周在北京开设了一家新诊所。")

DEFAULT_REVISE_DEMO = ReviseDemo(
    _DEMO_UNIT,
    flawed="医院上周在首都开设了一家新诊所。",
    answer="医院上周在北京开设了一家新诊所。",
)


def render_translate(
    template: PromptTemplate,
    unit: TranslationUnit,
    *,
    one_shot: bool = True,
    demo: TranslateDemo | None = None,
) -> RenderedPrompt:
    """Build the translate-stage prompt for a unit.

    With ``one_shot`` a worked demonstration, rendered through the same
    template, precedes the live request as a user/assistant message pair.
    """
    if template.stage != STAGE_TRANSLATE:
        raise PromptError(f"template {template.id!r} is not a translate template")

    def body_for(u: TranslationUnit) -> str:
        return _render_body(
            template,
            {
                "src_lang": language_name(u.src_lang),
                "tgt_lang": language_name(u.tgt_lang),
                "source": _translate_source(template, u),
                "constraints": serialize_constraints(u.constraints),
            },
        )

    messages: list[tuple[str, str]] = []
    if one_shot:
        demo = demo or DEFAULT_TRANSLATE_DEMO
        messages.append(("user", body_for(demo.unit)))
        messages.append(("assistant", demo.answer))
    messages.append(("user", body_for(unit)))
    return RenderedPrompt(template.id, tuple(messages), demonstration_included=one_shot)


def render_revise(
    template: PromptTemplate,
    unit: TranslationUnit,
    flawed: str,
    detection: DetectionResult,
    *,
    one_shot: bool = True,
    demo: ReviseDemo | None = None,
) -> RenderedPrompt:
    """Build the revise-stage prompt from a flawed hypothesis and its detection."""
    if template.stage != STAGE_REVISE:
        raise PromptError(f"template {template.id!r} is not a revise template")
    if template.variant == VARIANT_STANDARD and not detection.uncompleted:
        raise PromptError(
            "revise prompt requested for a hypothesis with no uncompleted constraints"
        )

    def body_for(u: TranslationUnit, current: str, det: DetectionResult) -> str:
        return _render_body(
            template,
            {
                "src_lang": language_name(u.src_lang),
                "tgt_lang": language_name(u.tgt_lang),
                "source": u.source_text,
                "constraints": serialize_constraints(u.constraints),
                "current_translation": current,
                "uncompleted_constraints": serialize_uncompleted(det.uncompleted),
            },
        )

    messages: list[tuple[str, str]] = []
    if one_shot:
        demo = demo or DEFAULT_REVISE_DEMO
        demo_detection = detect_uncompleted(demo.unit, demo.flawed)
        messages.append(("user", body_for(demo.unit, demo.flawed, demo_detection)))
        messages.append(("assistant", demo.answer))
    messages.append(("user", body_for(unit, flawed, detection)))
    return RenderedPrompt(template.id, tuple(messages), demonstration_included=one_shot)


# Verdict prompt for the experimental LLM-based detection mode. Original
# wording; results are not comparable to rule-based detection runs.
VERDICT_BODY = (
    "Check the translation below against each required expression.\n"
    "Source sentence ({src_lang}): {source}\n"
    "Required expressions: {constraints}\n"
    "Translation ({tgt_lang}): {current_translation}\n"
    "List every required expression whose target form is missing from the "
    "translation, one 'source -> target' entry per line. If none are "
    "missing, reply NONE."
)

VERDICT_TEMPLATE_ID = "verify-standard"


def render_verdict(unit: TranslationUnit, hypothesis: str) -> RenderedPrompt:
    body = VERDICT_BODY.format(
        src_lang=language_name(unit.src_lang),
        tgt_lang=language_name(unit.tgt_lang),
        source=unit.source_text,
        constraints=serialize_constraints(unit.constraints),
        current_translation=hypothesis,
    )
    return RenderedPrompt(VERDICT_TEMPLATE_ID, (("user", body),), demonstration_included=False)


def parse_verdict(text: str, unit: TranslationUnit) -> DetectionResult:
    """Map a backend verdict response onto the unit's constraint pairs.

    Lines containing ``->`` are matched against the unit's pairs by source
    form (case-insensitive); unmatched lines are ignored. A response of
    ``NONE`` (or no matching lines) marks everything satisfied.
    """
    flagged: set[int] = set()
    if text.strip().upper() != "NONE":
        for line in text.splitlines():
            if "->" not in line:
                continue
            src = line.split("->", 1)[0].strip().strip("-*•").strip().casefold()
            for idx, pair in enumerate(unit.constraints):
                if pair.source_form.casefold() == src:
                    flagged.add(idx)
    statuses = tuple(
        ConstraintStatus(pair, idx not in flagged)
        for idx, pair in enumerate(unit.constraints)
    )
    return DetectionResult.from_statuses(statuses)


def select_template(policy: EnsemblePolicy, iteration: int) -> str:
    """Pick a template id for a revision round under the given policy.

    ``random_per_iteration`` draws uniformly with a generator derived from
    (policy seed, iteration), so repeated queries return the same id.
    """
    if iteration < 0:
        raise ValueError("iteration must be non-negative")
    if policy.mode == "fixed_single":
        return policy.template_ids[0]
    digest = hashlib.sha256(f"{policy.seed}\x1f{iteration}".encode("utf-8")).digest()
    rng = random.Random(int.from_bytes(digest[:8], "big"))
    return policy.template_ids[rng.randrange(len(policy.template_ids))]


def load_template_dir(path: str | Path) -> dict[str, PromptTemplate]:
    """Load user templates from a directory with a ``manifest.json`` file.

    The manifest is a JSON list of ``{"id", "stage", "variant", "file"}``
    entries; each ``file`` is a UTF-8 text file holding the template body.
    """
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    templates: dict[str, PromptTemplate] = {}
    for entry in manifest:
        body = (path / entry["file"]).read_text(encoding="utf-8")
        template = PromptTemplate(
            entry["id"], entry["stage"], body, entry.get("variant", VARIANT_STANDARD)
        )
        templates[template.id] = template
    return templates
