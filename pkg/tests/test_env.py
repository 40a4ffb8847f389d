from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from akbe.core import Action, BudgetError, ConfigError, ContractViolation, Observation, QuestionSpec
from akbe.env import (
    EnvState,
    STRATA,
    ToolEnvironment,
    WorldConfig,
    generate_world,
    load_world,
    question_features,
    save_world,
    stratum_counts,
)


def q_with(p=0.5, hops=1, noise=0.2):
    return QuestionSpec("q", question_features(p, hops, noise, 6, ()), p, hops, noise, "a")


def test_default_mixture_counts():
    qs = generate_world(WorldConfig())
    counts = Counter(q.stratum for q in qs)
    assert counts == {"memory_easy": 240, "tool_dependent": 240, "noise_prone": 120}
    assert {q.hops_required for q in qs} == {1, 2}


def test_stratum_counts_sum_exactly():
    assert stratum_counts(10, (0.4, 0.4, 0.2)) == [4, 4, 2]
    assert stratum_counts(7, (0.4, 0.4, 0.2)) == [3, 3, 1]
    assert sum(stratum_counts(101, (1 / 3, 1 / 3, 1 / 3))) == 101


def test_world_is_seeded():
    a = generate_world(WorldConfig(n_questions=50, seed=4))
    b = generate_world(WorldConfig(n_questions=50, seed=4))
    c = generate_world(WorldConfig(n_questions=50, seed=5))
    assert a == b
    assert a != c


def test_strata_respect_ranges():
    cfg = WorldConfig(n_questions=300, seed=1)
    for q in generate_world(cfg):
        lo, hi = cfg.p_ranges[q.stratum]
        assert lo <= q.p_param <= hi
        lo, hi = cfg.noise_ranges[q.stratum]
        assert lo <= q.noise_rate <= hi
        assert len(q.features) == cfg.feature_dim


def test_world_jsonl_roundtrip(tmp_path):
    qs = generate_world(WorldConfig(n_questions=20))
    save_world(tmp_path / "w.jsonl", qs)
    assert load_world(tmp_path / "w.jsonl") == qs


@pytest.mark.parametrize("kw", [
    {"frac_memory_easy": 0.5},
    {"n_questions": 0},
    {"hop_distribution": [0.5, 0.6]},
    {"poison": 1.5},
    {"max_turns": 1},
])
def test_bad_world_config(kw):
    with pytest.raises(ConfigError):
        WorldConfig(**kw).validate()


def test_features_encode_bins():
    f = question_features(0.9, 2, 0.5, 6, (0.3,))
    assert f == (2 / 6, 0.0, 0.0, 1.0, 0.0, 1.0, 0.3)
    f = question_features(0.1, 1, 0.0, 6, ())
    assert f == (1 / 6, 1.0, 0.0, 0.0, 1.0, 0.0)


def test_transition_preconditions():
    env = ToolEnvironment(max_turns=2)
    q = q_with()
    rng = np.random.default_rng(0)
    with pytest.raises(ContractViolation):
        env.transition(q, EnvState(), Action.ANSWER_MEMORY, rng)
    with pytest.raises(BudgetError):
        env.transition(q, EnvState(turn=2), Action.TOOL_CALL, rng)
    with pytest.raises(ContractViolation):
        env.judge(q, EnvState(), Action.TOOL_CALL, rng)


def test_transition_frequencies_match_noise_rate():
    env = ToolEnvironment()
    q = q_with(noise=0.3)
    rng = np.random.default_rng(11)
    n = 20000
    misleading = 0
    for _ in range(n):
        obs, s = env.transition(q, EnvState(), Action.TOOL_CALL, rng)
        assert s.turn == 1
        if obs is Observation.MISLEADING:
            assert (s.useful_hops, s.misleading_count) == (0, 1)
            misleading += 1
        else:
            assert (s.useful_hops, s.misleading_count) == (1, 0)
    assert abs(misleading / n - 0.3) < 4 * np.sqrt(0.3 * 0.7 / n)


def test_judge_probabilities():
    env = ToolEnvironment(poison=0.25)
    q = q_with(p=0.7, hops=2)
    assert env.correct_probability(q, EnvState(), Action.ANSWER_MEMORY) == 0.7
    # memory answers ignore retrieved context unless poisoning is switched on
    assert env.correct_probability(q, EnvState(0, 2, 2), Action.ANSWER_MEMORY) == 0.7
    assert ToolEnvironment(poison=0.25, poison_memory=True).correct_probability(
        q, EnvState(0, 2, 2), Action.ANSWER_MEMORY) == pytest.approx(0.7 * 0.0625)
    assert env.correct_probability(q, EnvState(1, 0, 1), Action.ANSWER_EVIDENCE) == 0.0
    assert env.correct_probability(q, EnvState(2, 0, 2), Action.ANSWER_EVIDENCE) == 1.0
    assert env.correct_probability(q, EnvState(2, 1, 3), Action.ANSWER_EVIDENCE) == 0.25
    assert env.correct_probability(q, EnvState(2, 0, 2), Action.MALFORMED) == 0.0


def test_judge_monte_carlo():
    env = ToolEnvironment()
    q = q_with(p=0.35)
    rng = np.random.default_rng(5)
    n = 20000
    hits = sum(env.judge(q, EnvState(), Action.ANSWER_MEMORY, rng) for _ in range(n))
    assert abs(hits / n - 0.35) < 4 * np.sqrt(0.35 * 0.65 / n)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.integers(0, 3), st.floats(0, 1), st.integers(0, 4), st.integers(0, 4))
def test_judge_probability_in_unit_interval(p, hops, noise, useful, misleading):
    env = ToolEnvironment()
    q = q_with(p, hops, noise)
    s = EnvState(useful, misleading, useful + misleading)
    for a in (Action.ANSWER_MEMORY, Action.ANSWER_EVIDENCE, Action.MALFORMED):
        assert 0.0 <= env.correct_probability(q, s, a) <= 1.0


def test_strata_names_are_stable():
    assert STRATA == ("memory_easy", "tool_dependent", "noise_prone")
