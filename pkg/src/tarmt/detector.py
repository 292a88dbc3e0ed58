"""Rule-based detection of completed vs uncompleted translation constraints.

Lexical constraints are matched against a normalized hypothesis: token-aligned
matching for space-delimited target languages, plain substring matching for
CJK. Structural constraints are checked by XML well-formedness and by
comparing the hypothesis tag tree against the reference's.

All functions here are pure and safe to call concurrently.
"""

from __future__ import annotations

import re
import unicodedata
import xml.etree.ElementTree as ET
from dataclasses import dataclass

from .corpus import LEXICAL, STRUCTURAL, ConstraintPair, TranslationUnit

# Primary language subtags written without word separators and without case.
_CJK_LANGS = frozenset({"zh", "ja", "ko", "yue"})


def is_cjk_lang(lang: str) -> bool:
    primary = re.split(r"[-_]", lang.strip().lower(), maxsplit=1)[0]
    return primary in _CJK_LANGS


@dataclass(frozen=True)
class ConstraintStatus:
    """Verdict for one constraint pair against one hypothesis."""

    pair: ConstraintPair
    satisfied: bool
    matched_form: str | None = None
    match_offset: int | None = None


@dataclass(frozen=True)
class DetectionResult:
    """Partition of a unit's constraints into completed and uncompleted."""

    statuses: tuple[ConstraintStatus, ...]
    uncompleted: tuple[ConstraintPair, ...]
    all_satisfied: bool

    @classmethod
    def from_statuses(cls, statuses: tuple[ConstraintStatus, ...]) -> "DetectionResult":
        uncompleted = tuple(s.pair for s in statuses if not s.satisfied)
        return cls(statuses, uncompleted, not uncompleted)


def normalize(text: str, lang: str, *, fold_case: bool = True) -> str:
    """Normalize text for matching: NFC, collapsed whitespace, case folding.

    Case folding applies only to languages with bicameral scripts; CJK text
    passes through unchanged apart from NFC and whitespace collapse.
    """
    out = unicodedata.normalize("NFC", text)
    out = " ".join(out.split())
    if fold_case and not is_cjk_lang(lang):
        out = out.casefold()
    return out


def _is_word_char(ch: str) -> bool:
    return ch.isalnum()


def _token_aligned_find(haystack: str, needle: str) -> int | None:
    """Leftmost occurrence of needle whose ends align with token boundaries.

    Tokens are maximal runs of letters/digits; a needle edge that is itself
    non-alphanumeric is always boundary-aligned on that side.
    """
    start = 0
    while True:
        i = haystack.find(needle, start)
        if i < 0:
            return None
        j = i + len(needle)
        before_ok = (
            i == 0 or not _is_word_char(haystack[i - 1]) or not _is_word_char(needle[0])
        )
        after_ok = (
            j == len(haystack)
            or not _is_word_char(haystack[j])
            or not _is_word_char(needle[-1])
        )
        if before_ok and after_ok:
            return i
        start = i + 1


def match_lexical(
    pair: ConstraintPair,
    hypothesis: str,
    tgt_lang: str,
    *,
    case_sensitive: bool = False,
) -> ConstraintStatus:
    """Check whether any accepted target form of a pair occurs in a hypothesis.

    Alternatives are tried in list order and the first match wins;
    ``match_offset`` is the leftmost occurrence of that form in the
    normalized hypothesis.
    """
    if pair.kind != LEXICAL:
        raise ValueError("match_lexical requires a lexical constraint pair")
    fold = not case_sensitive
    hyp = normalize(hypothesis, tgt_lang, fold_case=fold)
    substring_ok = is_cjk_lang(tgt_lang)
    for form in pair.target_forms:
        needle = normalize(form, tgt_lang, fold_case=fold)
        if not needle:
            continue
        if substring_ok:
            offset = hyp.find(needle)
            offset = offset if offset >= 0 else None
        else:
            offset = _token_aligned_find(hyp, needle)
        if offset is not None:
            return ConstraintStatus(pair, True, matched_form=form, match_offset=offset)
    return ConstraintStatus(pair, False)


def detect_uncompleted(
    unit: TranslationUnit,
    hypothesis: str,
    *,
    case_sensitive: bool = False,
) -> DetectionResult:
    """Evaluate every lexical constraint of a unit against a hypothesis.

    Duplicated pairs are evaluated independently; a zero-constraint unit is
    trivially all-satisfied.
    """
    statuses = []
    for pair in unit.constraints:
        if pair.kind != LEXICAL:
            raise ValueError(
                f"unit {unit.id!r}: detect_uncompleted requires lexical constraints"
            )
        statuses.append(
            match_lexical(pair, hypothesis, unit.tgt_lang, case_sensitive=case_sensitive)
        )
    return DetectionResult.from_statuses(tuple(statuses))


@dataclass(frozen=True)
class XmlStructureSignature:
    """Tag tree of a fragment with all attributes and text stripped.

    ``skeleton`` is a tuple of nested ``(tag, children)`` pairs in document
    order, so equality is order-sensitive on siblings.
    """

    skeleton: tuple
    tag_count: int


def _parse_fragment(fragment: str) -> tuple[ET.Element | None, str | None]:
    try:
        return ET.fromstring(f"<root>{fragment}</root>"), None
    except ET.ParseError as exc:
        return None, str(exc)


def check_well_formed(fragment: str) -> bool:
    """True iff the fragment, wrapped in a synthetic root, parses as XML."""
    element, _ = _parse_fragment(fragment)
    return element is not None


def well_formed_diagnostic(fragment: str) -> str | None:
    """Parser diagnostic for a malformed fragment, or None when well-formed."""
    _, diagnostic = _parse_fragment(fragment)
    return diagnostic


def _skeleton(element: ET.Element) -> tuple:
    return (element.tag, tuple(_skeleton(child) for child in element))


def _count_tags(element: ET.Element) -> int:
    return 1 + sum(_count_tags(child) for child in element)


def structure_signature(fragment: str) -> XmlStructureSignature:
    """Extract the element-name tree of a well-formed fragment."""
    element, diagnostic = _parse_fragment(fragment)
    if element is None:
        raise ValueError(f"fragment is not well-formed XML: {diagnostic}")
    skeleton = tuple(_skeleton(child) for child in element)
    tag_count = sum(_count_tags(child) for child in element)
    return XmlStructureSignature(skeleton, tag_count)


# Feedback string shown to the reviser when a structural check fails; the
# structural detector has no per-term breakdown to offer.
STRUCTURE_MISMATCH_FEEDBACK = "XML structure mismatch"


def detect_structural(unit: TranslationUnit, hypothesis: str) -> DetectionResult:
    """Check a unit's structural constraint against its reference markup.

    A hypothesis completes the constraint when it is well-formed and, if the
    unit has a reference, its tag tree equals the reference's. A malformed
    reference is a corpus defect and raises.
    """
    statuses = []
    for pair in unit.constraints:
        if pair.kind != STRUCTURAL:
            raise ValueError(
                f"unit {unit.id!r}: detect_structural requires structural constraints"
            )
        ok = check_well_formed(hypothesis)
        if ok and unit.reference_text is not None:
            if not check_well_formed(unit.reference_text):
                raise ValueError(
                    f"unit {unit.id!r}: reference is not well-formed XML"
                )
            ok = structure_signature(hypothesis) == structure_signature(
                unit.reference_text
            )
        statuses.append(ConstraintStatus(pair, ok))
    return DetectionResult.from_statuses(tuple(statuses))


def detect(unit: TranslationUnit, hypothesis: str, *, case_sensitive: bool = False) -> DetectionResult:
    """Dispatch to the lexical or structural detector based on the unit's constraints."""
    if any(p.kind == STRUCTURAL for p in unit.constraints):
        return detect_structural(unit, hypothesis)
    return detect_uncompleted(unit, hypothesis, case_sensitive=case_sensitive)
