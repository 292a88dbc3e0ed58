"""Behavior model: override draws, revision dynamics, convergence arithmetic."""

from __future__ import annotations

import math

import pytest

from tarmt.detector import detect_uncompleted
from tarmt.memo_trap import (
    MemoTrapParams,
    distractor_for,
    initial_hypothesis,
    initial_state,
    override_draw,
    revised_hypothesis,
    revisions_to_converge,
)

from conftest import make_unit, synthetic_lexical_corpus


class TestInitialHypothesis:
    def test_zero_override_all_satisfied(self):
        corpus = synthetic_lexical_corpus(5, 3)
        params = MemoTrapParams(0.0, 1, seed=1)
        for unit in corpus:
            text = initial_hypothesis(unit, params)
            assert detect_uncompleted(unit, text).all_satisfied

    def test_full_override_nothing_satisfied(self):
        corpus = synthetic_lexical_corpus(5, 3)
        params = MemoTrapParams(1.0, 1, seed=1)
        for unit in corpus:
            text = initial_hypothesis(unit, params)
            result = detect_uncompleted(unit, text)
            assert not any(s.satisfied for s in result.statuses)

    def test_override_frequency_near_parameter(self):
        # 1,000 constraints at p=0.8: overridden fraction within 3 points
        corpus = synthetic_lexical_corpus(250, 4)
        params = MemoTrapParams(0.8, 1, seed=21)
        overridden = 0
        for unit in corpus:
            state = initial_state(unit, params)
            overridden += sum(state.per_constraint_overridden.values())
        fraction = overridden / (250 * 4)
        assert abs(fraction - 0.8) < 0.03

    def test_deterministic_given_seed(self):
        unit = synthetic_lexical_corpus(1, 4)[0]
        params = MemoTrapParams(0.5, 1, seed=21)
        assert initial_hypothesis(unit, params) == initial_hypothesis(unit, params)

    def test_draw_uniform_range(self):
        draws = [override_draw(3, f"u{i}", 0) for i in range(500)]
        assert all(0.0 <= d < 1.0 for d in draws)
        assert abs(sum(draws) / len(draws) - 0.5) < 0.05

    def test_distractor_contraction(self):
        assert distractor_for("新型冠状病毒") == "新冠病"
        assert "新冠" in distractor_for("新型冠状病毒")
        assert distractor_for("ab") == "a"


class TestRevisedHypothesis:
    def test_fix_one_leaves_rest_uncompleted(self):
        unit = synthetic_lexical_corpus(1, 3)[0]
        params = MemoTrapParams(1.0, 1, seed=2)
        state = initial_state(unit, params)
        assert len(state.uncompleted_indices) == 3
        text = revised_hypothesis(state, params)
        assert len(state.uncompleted_indices) == 2
        result = detect_uncompleted(unit, text)
        assert sum(1 for s in result.statuses if s.satisfied) == 1

    def test_fix_exceeding_uncompleted_satisfies_all(self):
        unit = synthetic_lexical_corpus(1, 1)[0]
        params = MemoTrapParams(1.0, 2, seed=2)
        state = initial_state(unit, params)
        text = revised_hypothesis(state, params)
        assert detect_uncompleted(unit, text).all_satisfied

    def test_no_regression_across_revisions(self):
        unit = synthetic_lexical_corpus(1, 5)[0]
        params = MemoTrapParams(1.0, 2, seed=4)
        state = initial_state(unit, params)
        satisfied_so_far: set[int] = set()
        for _ in range(4):
            text = revised_hypothesis(state, params)
            now = {
                i
                for i, status in enumerate(detect_uncompleted(unit, text).statuses)
                if status.satisfied
            }
            assert satisfied_so_far <= now
            satisfied_so_far = now

    def test_revisions_applied_counter(self):
        unit = synthetic_lexical_corpus(1, 2)[0]
        params = MemoTrapParams(1.0, 1, seed=5)
        state = initial_state(unit, params)
        revised_hypothesis(state, params)
        revised_hypothesis(state, params)
        assert state.revisions_applied == 2


class TestConvergenceArithmetic:
    @pytest.mark.parametrize("k,fix", [(1, 1), (3, 1), (3, 2), (5, 2), (6, 3)])
    def test_rounds_equal_ceiling(self, k, fix):
        unit = synthetic_lexical_corpus(1, k)[0]
        params = MemoTrapParams(1.0, fix, seed=6)
        state = initial_state(unit, params)
        overridden = len(state.uncompleted_indices)
        rounds = 0
        while state.uncompleted_indices:
            revised_hypothesis(state, params)
            rounds += 1
        assert rounds == revisions_to_converge(overridden, params) == math.ceil(k / fix)

    def test_params_validation(self):
        with pytest.raises(ValueError):
            MemoTrapParams(1.5, 1, 0)
        with pytest.raises(ValueError):
            MemoTrapParams(0.5, 0, 0)

    def test_structural_unit_rejected(self):
        unit = make_unit()
        structural = type(unit)(
            id="s", src_lang="en", tgt_lang="zh", source_text="a <ph>b</ph>",
            constraints=(type(unit.constraints[0])("s", (), kind="structural"),),
        )
        with pytest.raises(ValueError):
            initial_state(structural, MemoTrapParams(0.5, 1, 0))
