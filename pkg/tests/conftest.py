"""Shared test builders: units, corpora, and deterministic synthetic data."""

from __future__ import annotations

import random

import pytest

from tarmt.corpus import ConstraintPair, Corpus, TranslationUnit

# The worked example used throughout: two terminology constraints, one of
# which the initial translation misses.
TABLE_UNIT_SOURCE = "On 11 March 2020, WHO characterized COVID-19 as a pandemic."
TABLE_UNIT_REFERENCE = "2020年3月11日，世卫组织将新型冠状病毒列为大流行病。"
INITIAL_HYPOTHESIS = "2020年3月11日，世卫组织将新冠确定为大流行病。"
REVISED_HYPOTHESIS = "2020年3月11日，世卫组织将新型冠状病毒定性为大流行病。"


def make_unit(
    unit_id: str = "u1",
    constraints=(("WHO", ["世卫组织"]), ("COVID-19", ["新型冠状病毒"])),
    src_lang: str = "en",
    tgt_lang: str = "zh",
    source_text: str = TABLE_UNIT_SOURCE,
    reference_text: str | None = TABLE_UNIT_REFERENCE,
    seed_hypothesis: str | None = None,
) -> TranslationUnit:
    pairs = tuple(ConstraintPair(src, tuple(tgts)) for src, tgts in constraints)
    return TranslationUnit(
        id=unit_id,
        src_lang=src_lang,
        tgt_lang=tgt_lang,
        source_text=source_text,
        reference_text=reference_text,
        constraints=pairs,
        seed_hypothesis=seed_hypothesis,
    )


@pytest.fixture
def pandemic_unit() -> TranslationUnit:
    return make_unit()


_CJK_POOL = [chr(0x4E00 + i) for i in range(2400)]


def cjk_target(unit_index: int, pair_index: int, length: int = 3) -> str:
    # Disjoint character triples within a unit so constraints cannot
    # cross-satisfy each other.
    base = 3 * (unit_index * 8 + pair_index)
    return "".join(_CJK_POOL[(base + offset) % len(_CJK_POOL)] for offset in range(length))


def synthetic_lexical_corpus(
    n_units: int,
    k: int,
    *,
    name: str = "synthetic",
    tgt_lang: str = "zh",
) -> Corpus:
    """Corpus of units with k disjoint CJK-target constraints each."""
    units = []
    for i in range(n_units):
        pairs = tuple(
            ConstraintPair(f"term{i}_{j}", (cjk_target(i, j),)) for j in range(k)
        )
        source = "Sentence with " + " and ".join(p.source_form for p in pairs) + "."
        units.append(
            TranslationUnit(
                id=f"u{i:04d}",
                src_lang="en",
                tgt_lang=tgt_lang,
                source_text=source,
                constraints=pairs,
            )
        )
    return Corpus(tuple(units), name=name)


def planted_detection_case(rng: random.Random, unit_index: int):
    """One synthetic unit plus a hypothesis with known embed/omit decisions.

    Mixes CJK and space-delimited target languages, alternative target forms,
    and boundary-violating (glued) embeddings that must not count.
    """
    tgt_lang = rng.choice(["zh", "de"])
    k = rng.randint(1, 4)
    pairs = []
    chunks = ["start"]
    for j in range(k):
        if tgt_lang == "zh":
            primary = cjk_target(unit_index, j)
            alternative = primary + _CJK_POOL[(unit_index * 31 + j) % len(_CJK_POOL)]
        else:
            primary = f"wort{unit_index}x{j}"
            alternative = f"alt{unit_index}x{j}"
        forms = (primary, alternative) if rng.random() < 0.4 else (primary,)
        pairs.append(ConstraintPair(f"src{unit_index}_{j}", forms))
        roll = rng.random()
        if roll < 0.35:
            chunks.append(primary)
        elif roll < 0.5 and len(forms) > 1:
            chunks.append(forms[1])
        elif roll < 0.65 and tgt_lang == "de":
            # glued: token boundary violated, must not satisfy
            chunks.append(f"xx{primary}yy")
        # otherwise omitted entirely
    chunks.append("end")
    hypothesis = " ".join(chunks) if tgt_lang == "de" else "，".join(chunks)
    unit = TranslationUnit(
        id=f"p{unit_index:05d}",
        src_lang="en",
        tgt_lang=tgt_lang,
        source_text="Synthetic source " + " ".join(p.source_form for p in pairs),
        constraints=tuple(pairs),
    )
    return unit, hypothesis
