"""Corpus-level translation metrics: BLEU, CCR, SAR, SMR, external ingestion.

BLEU follows the classic corpus-level recipe: modified n-gram precisions for
orders 1-4, geometric mean, brevity penalty, no smoothing. Tokenization is
mteval-style international punctuation splitting for space-delimited
languages and character-level splitting of CJK codepoints for Chinese;
``xml_mode`` additionally treats each complete tag as a single token.

CCR is the percentage of lexical constraint pairs whose target form appears
in the hypothesis; SAR the percentage of hypotheses that parse as well-formed
XML; SMR the percentage whose tag tree equals the reference's. All metric
functions are pure, and BLEU exposes mergeable sufficient statistics.
"""

from __future__ import annotations

import csv
import functools
import logging
import math
import re
import sys
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import LEXICAL, Corpus, TranslationUnit
from .detector import (
    check_well_formed,
    is_cjk_lang,
    match_lexical,
    structure_signature,
)

logger = logging.getLogger(__name__)

NGRAM_ORDER = 4

_XML_TAG_RE = re.compile(r"</?[^<>\s][^<>]*>")

_CJK_RANGES = (
    (0x2E80, 0x2EFF),
    (0x2F00, 0x2FDF),
    (0x2FF0, 0x2FFF),
    (0x3000, 0x303F),
    (0x3100, 0x312F),
    (0x31A0, 0x31BF),
    (0x31C0, 0x31EF),
    (0x3200, 0x32FF),
    (0x3300, 0x33FF),
    (0x3400, 0x4DB5),
    (0x4E00, 0x9FFF),
    (0xF900, 0xFAFF),
    (0xFE10, 0xFE1F),
    (0xFE30, 0xFE4F),
    (0xFF00, 0xFFEF),
    (0x20000, 0x2A6D6),
    (0x2F800, 0x2FA1D),
)


def _is_cjk_char(ch: str) -> bool:
    code = ord(ch)
    return any(lo <= code <= hi for lo, hi in _CJK_RANGES)


@functools.lru_cache(maxsize=None)
def _property_chars(prefix: str) -> str:
    return "".join(
        chr(c)
        for c in range(sys.maxunicode + 1)
        if unicodedata.category(chr(c)).startswith(prefix)
    )


@functools.lru_cache(maxsize=None)
def _international_regexes() -> tuple[re.Pattern, re.Pattern, re.Pattern]:
    punct = re.escape(_property_chars("P"))
    symbols = re.escape(_property_chars("S"))
    return (
        re.compile(r"([^\d])([" + punct + r"])"),
        re.compile(r"([" + punct + r"])([^\d])"),
        re.compile(r"([" + symbols + r"])"),
    )


def tokenize_international(text: str) -> list[str]:
    """mteval-style tokenization: split punctuation and symbols off words,
    except punctuation sitting between two digits (decimal/thousand marks)."""
    nondigit_punct, punct_nondigit, symbol = _international_regexes()
    text = nondigit_punct.sub(r"\1 \2 ", text)
    text = punct_nondigit.sub(r" \1 \2", text)
    text = symbol.sub(r" \1 ", text)
    return text.split()


def tokenize_cjk(text: str) -> list[str]:
    """Character-level splitting of CJK codepoints; the remainder follows the
    international tokenizer."""
    spaced = []
    for ch in text:
        if _is_cjk_char(ch):
            spaced.append(f" {ch} ")
        else:
            spaced.append(ch)
    return tokenize_international("".join(spaced))


def tokenize(text: str, tgt_lang: str, xml_mode: bool = False) -> list[str]:
    """Tokenize one segment for BLEU; with ``xml_mode`` each complete XML tag
    (e.g. ``<ph>``) becomes one token before language tokenization."""
    base = tokenize_cjk if is_cjk_lang(tgt_lang) else tokenize_international
    if not xml_mode:
        return base(text)
    tokens: list[str] = []
    pos = 0
    for match in _XML_TAG_RE.finditer(text):
        tokens.extend(base(text[pos : match.start()]))
        tokens.append(match.group(0))
        pos = match.end()
    tokens.extend(base(text[pos:]))
    return tokens


@dataclass
class BleuStatistics:
    """Sufficient statistics of corpus BLEU; shards merge by addition."""

    correct: list[int] = field(default_factory=lambda: [0] * NGRAM_ORDER)
    total: list[int] = field(default_factory=lambda: [0] * NGRAM_ORDER)
    sys_len: int = 0
    ref_len: int = 0

    def merge(self, other: "BleuStatistics") -> "BleuStatistics":
        return BleuStatistics(
            [a + b for a, b in zip(self.correct, other.correct)],
            [a + b for a, b in zip(self.total, other.total)],
            self.sys_len + other.sys_len,
            self.ref_len + other.ref_len,
        )


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def accumulate_bleu(
    stats: BleuStatistics, hyp_tokens: Sequence[str], ref_tokens: Sequence[str]
) -> None:
    stats.sys_len += len(hyp_tokens)
    stats.ref_len += len(ref_tokens)
    for n in range(1, NGRAM_ORDER + 1):
        hyp_counts = _ngrams(hyp_tokens, n)
        if not hyp_counts:
            continue
        ref_counts = _ngrams(ref_tokens, n)
        for gram, count in hyp_counts.items():
            stats.correct[n - 1] += min(count, ref_counts.get(gram, 0))
            stats.total[n - 1] += count


def score_from_statistics(stats: BleuStatistics) -> float:
    """BLEU in [0, 100] from sufficient statistics, without smoothing.

    Orders with no hypothesis n-grams at all (corpus shorter than the order)
    are dropped from the geometric mean so that identical short segments can
    still reach 100.
    """
    precisions = [
        stats.correct[n] / stats.total[n]
        for n in range(NGRAM_ORDER)
        if stats.total[n] > 0
    ]
    if not precisions or any(p == 0.0 for p in precisions):
        return 0.0
    if stats.sys_len == 0:
        return 0.0
    brevity = 1.0
    if stats.sys_len < stats.ref_len:
        brevity = math.exp(1.0 - stats.ref_len / stats.sys_len)
    geo_mean = math.exp(sum(math.log(p) for p in precisions) / len(precisions))
    return 100.0 * brevity * geo_mean


def bleu(
    hypotheses: Sequence[str],
    references: Sequence[str],
    tgt_lang: str,
    xml_mode: bool = False,
) -> float:
    """Corpus-level BLEU over parallel hypothesis/reference lists."""
    if len(hypotheses) != len(references):
        raise ValueError(
            f"length mismatch: {len(hypotheses)} hypotheses vs "
            f"{len(references)} references"
        )
    if not hypotheses:
        raise ValueError("bleu needs at least one segment pair")
    stats = BleuStatistics()
    for idx, (hyp, ref) in enumerate(zip(hypotheses, references)):
        if not ref.strip():
            raise ValueError(f"empty reference at index {idx}")
        accumulate_bleu(stats, tokenize(hyp, tgt_lang, xml_mode), tokenize(ref, tgt_lang, xml_mode))
    return score_from_statistics(stats)


def sentence_bleu_smoothed(
    hypothesis: str, reference: str, tgt_lang: str, xml_mode: bool = False, add_k: float = 1.0
) -> float:
    """Per-sentence BLEU with additive smoothing, for debugging output only.

    Not comparable with the unsmoothed corpus score.
    """
    stats = BleuStatistics()
    accumulate_bleu(
        stats, tokenize(hypothesis, tgt_lang, xml_mode), tokenize(reference, tgt_lang, xml_mode)
    )
    precisions = []
    for n in range(NGRAM_ORDER):
        if stats.total[n] == 0:
            continue
        precisions.append((stats.correct[n] + add_k) / (stats.total[n] + add_k))
    if not precisions or stats.sys_len == 0:
        return 0.0
    brevity = 1.0
    if stats.sys_len < stats.ref_len:
        brevity = math.exp(1.0 - stats.ref_len / stats.sys_len)
    return 100.0 * brevity * math.exp(sum(math.log(p) for p in precisions) / len(precisions))


def ccr(
    pairs: Iterable[tuple[TranslationUnit, str]],
    *,
    case_sensitive: bool = False,
) -> float:
    """Constraints completion rate over (unit, hypothesis) pairs, in percent.

    Every listed constraint pair counts once (duplicates included); a pair is
    credited when any of its accepted target forms matches. Units without
    constraints are excluded from both numerator and denominator.
    """
    satisfied = 0
    total = 0
    for unit, hypothesis in pairs:
        for pair in unit.constraints:
            if pair.kind != LEXICAL:
                raise ValueError(f"unit {unit.id!r}: ccr requires a lexical corpus")
            total += 1
            status = match_lexical(
                pair, hypothesis, unit.tgt_lang, case_sensitive=case_sensitive
            )
            if status.satisfied:
                satisfied += 1
    if total == 0:
        raise ValueError("ccr is undefined: no constraints in the given units")
    return 100.0 * satisfied / total


def sar(hypotheses: Sequence[str]) -> float:
    """Structure accuracy rate: percentage of well-formed hypotheses."""
    if not hypotheses:
        raise ValueError("sar needs at least one hypothesis")
    ok = sum(1 for h in hypotheses if check_well_formed(h))
    return round(100.0 * ok / len(hypotheses), 2)


def smr(hypotheses: Sequence[str], references: Sequence[str]) -> float:
    """Structure match rate: percentage of hypotheses whose tag tree equals
    the reference's (sibling order included)."""
    if len(hypotheses) != len(references):
        raise ValueError(
            f"length mismatch: {len(hypotheses)} hypotheses vs "
            f"{len(references)} references"
        )
    if not hypotheses:
        raise ValueError("smr needs at least one hypothesis")
    matches = 0
    for idx, (hyp, ref) in enumerate(zip(hypotheses, references)):
        if not check_well_formed(ref):
            raise ValueError(f"reference at index {idx} is not well-formed XML")
        if check_well_formed(hyp) and structure_signature(hyp) == structure_signature(ref):
            matches += 1
    return round(100.0 * matches / len(hypotheses), 2)


def ingest_external(path: str | Path, name: str) -> dict[str, float]:
    """Read externally computed per-unit scores from a two-column TSV."""
    scores: dict[str, float] = {}
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 2:
                raise ValueError(f"{name}: line {lineno}: expected unit_id<TAB>score")
            unit_id = row[0].strip()
            if unit_id in scores:
                raise ValueError(f"{name}: line {lineno}: duplicate unit id {unit_id!r}")
            try:
                scores[unit_id] = float(row[1])
            except ValueError as exc:
                raise ValueError(
                    f"{name}: line {lineno}: bad score {row[1]!r}"
                ) from exc
    return scores


def external_mean(scores: dict[str, float], unit_ids: Sequence[str]) -> tuple[float, list[str]]:
    """Corpus mean of an external score over the given ids, plus missing ids."""
    present = [scores[uid] for uid in unit_ids if uid in scores]
    missing = [uid for uid in unit_ids if uid not in scores]
    if missing:
        logger.warning("external scores missing for %d unit(s): %s", len(missing), missing[:10])
    if not present:
        raise ValueError("no external scores cover this corpus")
    return sum(present) / len(present), missing


@dataclass
class MetricReport:
    """Corpus metrics for one set of final hypotheses."""

    corpus_name: str
    n_units: int
    n_constraints: int
    bleu: float | None = None
    ccr_percent: float | None = None
    sar_percent: float | None = None
    smr_percent: float | None = None
    external_scores: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "corpus_name": self.corpus_name,
            "n_units": self.n_units,
            "n_constraints": self.n_constraints,
            "bleu": self.bleu,
            "ccr_percent": self.ccr_percent,
            "sar_percent": self.sar_percent,
            "smr_percent": self.smr_percent,
            "external_scores": self.external_scores,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricReport":
        return cls(
            corpus_name=data["corpus_name"],
            n_units=data["n_units"],
            n_constraints=data["n_constraints"],
            bleu=data.get("bleu"),
            ccr_percent=data.get("ccr_percent"),
            sar_percent=data.get("sar_percent"),
            smr_percent=data.get("smr_percent"),
            external_scores=dict(data.get("external_scores", {})),
        )


def evaluate_pairs(
    corpus: Corpus,
    finals: Sequence[str],
    *,
    xml_mode: bool = False,
    case_sensitive: bool = False,
) -> MetricReport:
    """Build a MetricReport for final hypotheses aligned with a corpus.

    Lexical corpora get BLEU (when references exist) and CCR; structural
    corpora get BLEU, SAR, and SMR, with ``xml_mode`` controlling whether
    tags count as BLEU tokens.
    """
    if len(finals) != len(corpus.units):
        raise ValueError(
            f"length mismatch: {len(finals)} hypotheses vs {len(corpus.units)} units"
        )
    report = MetricReport(
        corpus_name=corpus.name,
        n_units=len(corpus.units),
        n_constraints=corpus.total_constraints,
    )
    references = [u.reference_text for u in corpus.units]
    have_refs = all(r is not None for r in references)
    if have_refs and corpus.units:
        report.bleu = bleu(
            list(finals), references, corpus.units[0].tgt_lang, xml_mode=xml_mode
        )
    elif not have_refs:
        logger.warning("corpus %s lacks references; BLEU skipped", corpus.name)

    if corpus.constraint_kind == LEXICAL:
        if corpus.total_constraints > 0:
            report.ccr_percent = ccr(
                zip(corpus.units, finals), case_sensitive=case_sensitive
            )
        else:
            logger.warning("corpus %s has no constraints; CCR skipped", corpus.name)
    else:
        report.sar_percent = sar(list(finals))
        if have_refs:
            report.smr_percent = smr(list(finals), references)
        else:
            logger.warning("corpus %s lacks references; SMR skipped", corpus.name)
    return report


def evaluate_traces(corpus: Corpus, traces, **kwargs) -> MetricReport:
    """Evaluate the final hypothesis of each trace against the corpus."""
    by_id = {t.unit_id: t for t in traces}
    missing = [u.id for u in corpus.units if u.id not in by_id]
    if missing:
        raise ValueError(f"traces missing for unit(s): {', '.join(missing[:10])}")
    finals = [by_id[u.id].final_text for u in corpus.units]
    return evaluate_pairs(corpus, finals, **kwargs)
