"""Data model for constrained-translation corpora, plus importers and sampling.

A corpus is an ordered list of translation units. Each unit carries a source
sentence, an optional reference, and a set of constraint pairs that the
translation must satisfy: either lexical (required target expressions) or
structural (inline XML markup that must survive translation).

Canonical interchange format is JSON Lines, one unit per line:

    {"id": "...", "src_lang": "en", "tgt_lang": "zh", "source": "...",
     "reference": "...", "seed_hypothesis": "...",
     "constraints": [{"source": "...", "targets": ["...", "..."]}]}

All importers normalize into this model (text NFC-normalized at import).
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
import unicodedata
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

logger = logging.getLogger(__name__)

LEXICAL = "lexical"
STRUCTURAL = "structural"

_TAG_RE = re.compile(r"</?[a-zA-Z_][^<>]*>")


class CorpusFormatError(ValueError):
    """Raised when an input file cannot be mapped into the canonical model."""


@dataclass(frozen=True)
class ConstraintPair:
    """One bilingual constraint: a source expression and its accepted target forms.

    ``target_forms`` lists the primary target first, then accepted
    alternatives. Structural pairs carry no target forms; their
    ``source_form`` is the id of the structured segment and the required
    structure is checked against the unit's reference.
    """

    source_form: str
    target_forms: tuple[str, ...] = ()
    kind: str = LEXICAL

    def __post_init__(self) -> None:
        if self.kind not in (LEXICAL, STRUCTURAL):
            raise ValueError(f"unknown constraint kind: {self.kind!r}")
        object.__setattr__(self, "target_forms", tuple(self.target_forms))
        if self.kind == LEXICAL:
            if not self.source_form.strip():
                raise ValueError("lexical constraint has empty source_form")
            if not self.target_forms:
                raise ValueError(
                    f"lexical constraint {self.source_form!r} has no target forms"
                )
            if any(not t for t in self.target_forms):
                raise ValueError(
                    f"lexical constraint {self.source_form!r} has an empty target form"
                )
        else:
            if self.target_forms:
                raise ValueError("structural constraint must not carry target forms")


@dataclass(frozen=True)
class TranslationUnit:
    """One source sentence with its constraint set and optional reference."""

    id: str
    src_lang: str
    tgt_lang: str
    source_text: str
    reference_text: str | None = None
    constraints: tuple[ConstraintPair, ...] = ()
    seed_hypothesis: str | None = None

    def __post_init__(self) -> None:
        if not self.source_text:
            raise ValueError(f"unit {self.id!r} has empty source_text")
        object.__setattr__(self, "constraints", tuple(self.constraints))

    @property
    def k(self) -> int:
        return len(self.constraints)


@dataclass(frozen=True)
class Corpus:
    """Ordered, immutable collection of units sharing one constraint kind."""

    units: tuple[TranslationUnit, ...]
    name: str = "corpus"
    constraint_kind: str = LEXICAL

    def __post_init__(self) -> None:
        object.__setattr__(self, "units", tuple(self.units))
        for unit in self.units:
            for pair in unit.constraints:
                if pair.kind != self.constraint_kind:
                    raise ValueError(
                        f"unit {unit.id!r} carries a {pair.kind} constraint in a "
                        f"{self.constraint_kind} corpus"
                    )

    def __len__(self) -> int:
        return len(self.units)

    def __iter__(self) -> Iterator[TranslationUnit]:
        return iter(self.units)

    def __getitem__(self, idx: int) -> TranslationUnit:
        return self.units[idx]

    @property
    def total_constraints(self) -> int:
        return sum(u.k for u in self.units)

    def unit_by_id(self, unit_id: str) -> TranslationUnit:
        for unit in self.units:
            if unit.id == unit_id:
                return unit
        raise KeyError(unit_id)


@dataclass(frozen=True)
class ValidationIssue:
    code: str
    unit_id: str | None
    message: str


DUPLICATE_ID = "DuplicateId"
EMPTY_CONSTRAINTS = "EmptyConstraints"
CONSTRAINT_NOT_IN_SOURCE = "ConstraintNotInSource"


def _nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def _source_contains(unit: TranslationUnit, pair: ConstraintPair) -> bool:
    # Import-time containment check mirrors the detector's normalization:
    # NFC, collapsed whitespace, case-folded.
    haystack = " ".join(_nfc(unit.source_text).split()).casefold()
    needle = " ".join(_nfc(pair.source_form).split()).casefold()
    return bool(needle) and needle in haystack


def load_corpus(
    path: str | Path,
    format: str,
    *,
    src_lang: str | None = None,
    tgt_lang: str | None = None,
    name: str | None = None,
) -> Corpus:
    """Load a corpus file in one of the supported upstream formats.

    Supported formats:

    - ``jsonl``: the canonical JSON Lines layout (see module docstring).
    - ``dinu_tsv``: tab-separated ``source, reference, term_src, term_tgt, ...``
      with term columns alternating; language pair defaults to en->de.
    - ``wmt21_tt``: tab-separated ``id, source, reference, terms`` where
      ``terms`` is ``;``-joined ``src -> tgt`` entries, alternative targets
      ``|``-separated; defaults to en->zh.
    - ``lxm_json``: ``{"src_lang": .., "tgt_lang": .., "units": [{"id": ..,
      "source": .., "reference": ..}, ...]}`` with inline XML markup; every
      markup-bearing unit receives one structural constraint.

    Lexical constraints whose source form does not occur in the source
    sentence are kept and logged as warnings (alignment-derived corpora are
    noisy), never rejected.
    """
    path = Path(path)
    corpus_name = name or path.stem
    if format == "jsonl":
        corpus = _load_jsonl(path, corpus_name)
    elif format == "dinu_tsv":
        corpus = _load_dinu_tsv(path, corpus_name, src_lang or "en", tgt_lang or "de")
    elif format == "wmt21_tt":
        corpus = _load_wmt21_tt(path, corpus_name, src_lang or "en", tgt_lang or "zh")
    elif format == "lxm_json":
        corpus = _load_lxm_json(path, corpus_name, src_lang, tgt_lang)
    else:
        raise ValueError(f"unknown corpus format: {format!r}")

    for unit in corpus.units:
        for pair in unit.constraints:
            if pair.kind == LEXICAL and not _source_contains(unit, pair):
                logger.warning(
                    "unit %s: constraint source %r not found in source text",
                    unit.id,
                    pair.source_form,
                )
    return corpus


def _record_error(path: Path, lineno: int, problem: str) -> CorpusFormatError:
    return CorpusFormatError(f"{path}: line {lineno}: {problem}")


def _load_jsonl(path: Path, name: str) -> Corpus:
    units: list[TranslationUnit] = []
    kind = None
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise _record_error(path, lineno, f"invalid JSON ({exc.msg})") from exc
            try:
                pairs = []
                for c in rec.get("constraints", ()):
                    pair_kind = c.get("kind", LEXICAL)
                    targets = tuple(_nfc(t) for t in c.get("targets", ()))
                    pairs.append(
                        ConstraintPair(_nfc(c["source"]), targets, pair_kind)
                    )
                    kind = kind or pair_kind
                units.append(
                    TranslationUnit(
                        id=str(rec["id"]),
                        src_lang=rec["src_lang"],
                        tgt_lang=rec["tgt_lang"],
                        source_text=_nfc(rec["source"]),
                        reference_text=_nfc(rec["reference"])
                        if rec.get("reference") is not None
                        else None,
                        constraints=tuple(pairs),
                        seed_hypothesis=_nfc(rec["seed_hypothesis"])
                        if rec.get("seed_hypothesis") is not None
                        else None,
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                field_name = exc.args[0] if isinstance(exc, KeyError) else exc
                raise _record_error(
                    path, lineno, f"bad record field: {field_name}"
                ) from exc
    return Corpus(tuple(units), name=name, constraint_kind=kind or LEXICAL)


def _load_dinu_tsv(path: Path, name: str, src_lang: str, tgt_lang: str) -> Corpus:
    units = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) < 2:
                raise _record_error(path, lineno, "expected at least source<TAB>reference")
            term_cols = cols[2:]
            if len(term_cols) % 2 != 0:
                raise _record_error(path, lineno, "odd number of term columns")
            pairs = []
            for i in range(0, len(term_cols), 2):
                src_term, tgt_term = term_cols[i], term_cols[i + 1]
                if not src_term and not tgt_term:
                    continue
                try:
                    pairs.append(ConstraintPair(_nfc(src_term), (_nfc(tgt_term),)))
                except ValueError as exc:
                    raise _record_error(path, lineno, str(exc)) from exc
            try:
                units.append(
                    TranslationUnit(
                        id=f"{lineno:06d}",
                        src_lang=src_lang,
                        tgt_lang=tgt_lang,
                        source_text=_nfc(cols[0]),
                        reference_text=_nfc(cols[1]) if cols[1] else None,
                        constraints=tuple(pairs),
                    )
                )
            except ValueError as exc:
                raise _record_error(path, lineno, str(exc)) from exc
    return Corpus(tuple(units), name=name, constraint_kind=LEXICAL)


def _load_wmt21_tt(path: Path, name: str, src_lang: str, tgt_lang: str) -> Corpus:
    units = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) < 3:
                raise _record_error(path, lineno, "expected id<TAB>source<TAB>reference[<TAB>terms]")
            terms = cols[3] if len(cols) > 3 else ""
            pairs = []
            for entry in terms.split(";"):
                entry = entry.strip()
                if not entry:
                    continue
                if "->" not in entry:
                    raise _record_error(
                        path, lineno, f"term entry without '->': {entry!r} (field terms)"
                    )
                src_term, _, tgt_part = entry.partition("->")
                targets = tuple(
                    _nfc(t.strip()) for t in tgt_part.split("|") if t.strip()
                )
                try:
                    pairs.append(ConstraintPair(_nfc(src_term.strip()), targets))
                except ValueError as exc:
                    raise _record_error(path, lineno, str(exc)) from exc
            try:
                units.append(
                    TranslationUnit(
                        id=cols[0],
                        src_lang=src_lang,
                        tgt_lang=tgt_lang,
                        source_text=_nfc(cols[1]),
                        reference_text=_nfc(cols[2]) if cols[2] else None,
                        constraints=tuple(pairs),
                    )
                )
            except ValueError as exc:
                raise _record_error(path, lineno, str(exc)) from exc
    return Corpus(tuple(units), name=name, constraint_kind=LEXICAL)


def _load_lxm_json(
    path: Path, name: str, src_lang: str | None, tgt_lang: str | None
) -> Corpus:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise _record_error(path, exc.lineno, f"invalid JSON ({exc.msg})") from exc
    src = src_lang or doc.get("src_lang")
    tgt = tgt_lang or doc.get("tgt_lang")
    if not src or not tgt:
        raise CorpusFormatError(f"{path}: missing src_lang/tgt_lang")
    units = []
    for idx, rec in enumerate(doc.get("units", ()), start=1):
        try:
            unit_id = str(rec["id"])
            source = _nfc(rec["source"])
            reference = _nfc(rec["reference"]) if rec.get("reference") else None
        except (KeyError, TypeError) as exc:
            raise CorpusFormatError(f"{path}: unit #{idx}: bad field {exc}") from exc
        # Only markup-bearing segments carry a structural constraint; plain
        # segments are translated but contribute nothing to SAR/SMR feedback.
        bearing = _TAG_RE.search(source) or (reference and _TAG_RE.search(reference))
        pairs = (
            (ConstraintPair(unit_id, (), STRUCTURAL),) if bearing else ()
        )
        units.append(
            TranslationUnit(
                id=unit_id,
                src_lang=src,
                tgt_lang=tgt,
                source_text=source,
                reference_text=reference,
                constraints=pairs,
            )
        )
    return Corpus(tuple(units), name=name, constraint_kind=STRUCTURAL)


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus in the canonical JSONL format (UTF-8, NFC, LF endings)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for unit in corpus.units:
            rec: dict = {
                "id": unit.id,
                "src_lang": unit.src_lang,
                "tgt_lang": unit.tgt_lang,
                "source": unit.source_text,
            }
            if unit.reference_text is not None:
                rec["reference"] = unit.reference_text
            if unit.seed_hypothesis is not None:
                rec["seed_hypothesis"] = unit.seed_hypothesis
            rec["constraints"] = [
                {"source": p.source_form, "targets": list(p.target_forms)}
                if p.kind == LEXICAL
                else {"source": p.source_form, "targets": [], "kind": STRUCTURAL}
                for p in unit.constraints
            ]
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True))
            fh.write("\n")


def validate_corpus(corpus: Corpus, *, require_constraints: bool = False) -> list[ValidationIssue]:
    """Report structural problems in a corpus; an empty list means clean."""
    issues: list[ValidationIssue] = []
    seen: set[str] = set()
    for unit in corpus.units:
        if unit.id in seen:
            issues.append(
                ValidationIssue(DUPLICATE_ID, unit.id, f"duplicate unit id {unit.id!r}")
            )
        seen.add(unit.id)
        if require_constraints and corpus.constraint_kind == LEXICAL and not unit.constraints:
            issues.append(
                ValidationIssue(
                    EMPTY_CONSTRAINTS, unit.id, f"unit {unit.id!r} has no constraints"
                )
            )
        for pair in unit.constraints:
            if pair.kind == LEXICAL and not _source_contains(unit, pair):
                issues.append(
                    ValidationIssue(
                        CONSTRAINT_NOT_IN_SOURCE,
                        unit.id,
                        f"constraint source {pair.source_form!r} not in source text",
                    )
                )
    return issues


def _unit_rng(seed: int, unit_id: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}\x1f{unit_id}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def subsample_constraints(corpus: Corpus, k: int, seed: int) -> Corpus:
    """Keep exactly ``k`` constraints per unit, sampled without replacement.

    Sampling is deterministic per (seed, unit id); the surviving constraints
    keep their original relative order. Units with fewer than ``k``
    constraints are dropped (count logged).
    """
    if k <= 0:
        raise ValueError("k must be a positive integer")
    kept: list[TranslationUnit] = []
    dropped = 0
    for unit in corpus.units:
        if unit.k < k:
            dropped += 1
            continue
        rng = _unit_rng(seed, unit.id)
        indices = sorted(rng.sample(range(unit.k), k))
        kept.append(replace(unit, constraints=tuple(unit.constraints[i] for i in indices)))
    if dropped:
        logger.warning("subsample k=%d dropped %d unit(s) with fewer constraints", k, dropped)
    if not kept:
        raise ValueError(f"no unit has {k} or more constraints")
    return Corpus(tuple(kept), name=f"{corpus.name}-k{k}", constraint_kind=corpus.constraint_kind)
