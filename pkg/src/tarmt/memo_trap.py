"""Deterministic translator/reviser behavior model for mock backends.

The model emulates a translator that sometimes overrides its constraints with
a memorized shorter form, and a reviser that repairs a fixed number of missed
constraints per round. Dynamics are closed-form: a unit whose initial
hypothesis misses ``m`` constraints converges after ``ceil(m / fix)``
revisions, which makes full pipeline runs checkable by arithmetic.

Synthetic hypotheses are a readable scaffold, not natural language: one
``[T:<target>]`` slot per satisfied constraint and one ``[~<distractor>]``
slot per overridden one, joined by filler tokens.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

from .corpus import LEXICAL, TranslationUnit


@dataclass(frozen=True)
class MemoTrapParams:
    """Override/fix dynamics of the behavior model."""

    override_prob_per_constraint: float = 0.8
    fix_per_revision: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.override_prob_per_constraint <= 1.0:
            raise ValueError("override probability must be in [0, 1]")
        if self.fix_per_revision < 1:
            raise ValueError("fix_per_revision must be positive")


@dataclass
class MemoTrapState:
    """Per-unit progress: which constraints are currently overridden."""

    unit_id: str
    targets: tuple[str, ...]
    per_constraint_overridden: dict[int, bool] = field(default_factory=dict)
    revisions_applied: int = 0

    @property
    def uncompleted_indices(self) -> list[int]:
        return [i for i in range(len(self.targets)) if self.per_constraint_overridden.get(i)]


def override_draw(seed: int, unit_id: str, index: int) -> float:
    """Uniform draw in [0, 1) derived from (seed, unit id, constraint index)."""
    digest = hashlib.sha256(f"{seed}\x1f{unit_id}\x1f{index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def distractor_for(target: str) -> str:
    """Deterministic wrong rendering of a target: every other character.

    The contraction mimics the shortened mainstream form a translator falls
    back to; a 6-character term starts with its familiar 2-character
    abbreviation (e.g. 新型冠状病毒 contracts to 新冠病).
    """
    return target[::2]


def _slot(index: int, target: str, overridden: bool, alternatives: tuple[str, ...]) -> str:
    if not overridden:
        return f"[T:{target}]"
    distractor = distractor_for(target)
    # The truncation must not accidentally satisfy a shorter alternative form.
    if any(alt in distractor for alt in alternatives):
        return f"[miss{index}]"
    return f"[~{distractor}]"


def render_hypothesis(state: MemoTrapState, alternatives: tuple[tuple[str, ...], ...] | None = None) -> str:
    if not state.targets:
        return "mock translation of the sentence."
    alternatives = alternatives or tuple((t,) for t in state.targets)
    slots = [
        _slot(i, target, bool(state.per_constraint_overridden.get(i)), alternatives[i])
        for i, target in enumerate(state.targets)
    ]
    return "mt " + " ".join(slots)


def initial_state(unit: TranslationUnit, params: MemoTrapParams) -> MemoTrapState:
    for pair in unit.constraints:
        if pair.kind != LEXICAL:
            raise ValueError("memo-trap model handles lexical units only")
    overridden = {
        i: override_draw(params.seed, unit.id, i) < params.override_prob_per_constraint
        for i in range(unit.k)
    }
    return MemoTrapState(
        unit_id=unit.id,
        targets=tuple(p.target_forms[0] for p in unit.constraints),
        per_constraint_overridden=overridden,
    )


def initial_hypothesis(unit: TranslationUnit, params: MemoTrapParams) -> str:
    """Synthetic first translation: each constraint either embedded or overridden."""
    state = initial_state(unit, params)
    return render_hypothesis(state, tuple(p.target_forms for p in unit.constraints))


def revised_hypothesis(state: MemoTrapState, params: MemoTrapParams) -> str:
    """Apply one revision round: repair the first ``fix_per_revision`` misses.

    Previously satisfied constraints never regress; the state is advanced in
    place.
    """
    for index in state.uncompleted_indices[: params.fix_per_revision]:
        state.per_constraint_overridden[index] = False
    state.revisions_applied += 1
    return render_hypothesis(state)


def revisions_to_converge(overridden_at_start: int, params: MemoTrapParams) -> int:
    """Closed-form number of revision rounds until all constraints hold."""
    return math.ceil(overridden_at_start / params.fix_per_revision)
