"""Synthetic tool environment with a known knowledge boundary per question."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .core import (
    Action,
    BudgetError,
    ConfigError,
    ContractViolation,
    Observation,
    QuestionSpec,
    read_jsonl,
    write_jsonl,
)

STRATA = ("memory_easy", "tool_dependent", "noise_prone")

# p_param and noise_rate bins exposed to the policy through question features
P_BINS = (1.0 / 3.0, 2.0 / 3.0)
NOISE_BIN = 0.3
N_BASE_FEATURES = 6


@dataclass(frozen=True)
class EnvState:
    useful_hops: int = 0
    misleading_count: int = 0
    turn: int = 0


@dataclass
class WorldConfig:
    n_questions: int = 600
    frac_memory_easy: float = 0.4
    frac_tool_dependent: float = 0.4
    frac_noise_prone: float = 0.2
    # probabilities over hops 1..len(hop_distribution)
    hop_distribution: list = field(default_factory=lambda: [0.5, 0.5])
    p_ranges: dict = field(default_factory=lambda: {
        "memory_easy": [0.95, 1.0],
        "tool_dependent": [0.0, 0.15],
        "noise_prone": [0.6, 0.9],
    })
    noise_ranges: dict = field(default_factory=lambda: {
        "memory_easy": [0.0, 0.1],
        "tool_dependent": [0.0, 0.15],
        "noise_prone": [0.6, 0.9],
    })
    n_distractors: int = 2
    distractor_scale: float = 0.5
    max_turns: int = 6
    poison: float = 0.25
    # misleading context also degrades memory answers
    poison_memory: bool = False
    seed: int = 0

    @property
    def fractions(self) -> tuple:
        return (self.frac_memory_easy, self.frac_tool_dependent, self.frac_noise_prone)

    @property
    def feature_dim(self) -> int:
        return N_BASE_FEATURES + self.n_distractors

    def validate(self) -> "WorldConfig":
        fr = self.fractions
        if any(f < 0 or f > 1 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"mixture fractions {fr} must lie in [0, 1] and sum to 1")
        if self.n_questions < 1:
            raise ConfigError("n_questions must be >= 1")
        if self.max_turns < 1:
            raise ConfigError("max_turns must be >= 1")
        hd = self.hop_distribution
        if not hd or any(h < 0 for h in hd) or abs(sum(hd) - 1.0) > 1e-9:
            raise ConfigError("hop_distribution must be a probability vector")
        if len(hd) > self.max_turns:
            raise ConfigError("hop_distribution extends beyond max_turns")
        for name in STRATA:
            for ranges in (self.p_ranges, self.noise_ranges):
                lo, hi = ranges[name]
                if not 0.0 <= lo <= hi <= 1.0:
                    raise ConfigError(f"bad range {ranges[name]} for stratum {name}")
        if not 0.0 <= self.poison <= 1.0:
            raise ConfigError("poison must lie in [0, 1]")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown world keys: {sorted(unknown)}")
        return cls(**d)


def stratum_counts(n: int, fractions) -> list:
    """Split ``n`` by ``fractions`` with largest-remainder rounding (ties to the earlier stratum)."""
    raw = [n * f for f in fractions]
    counts = [math.floor(r + 1e-9) for r in raw]
    left = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def question_features(p_param, hops_required, noise_rate, max_turns, distractors) -> tuple:
    p_bin = int(p_param > P_BINS[0]) + int(p_param > P_BINS[1])
    feats = [hops_required / max_turns, 0.0, 0.0, 0.0, 0.0, 0.0]
    feats[1 + p_bin] = 1.0
    feats[4 + int(noise_rate >= NOISE_BIN)] = 1.0
    return tuple(feats) + tuple(float(x) for x in distractors)


def generate_world(cfg: WorldConfig, prefix: str = "q") -> list:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    counts = stratum_counts(cfg.n_questions, cfg.fractions)
    labels = [name for name, c in zip(STRATA, counts) for _ in range(c)]
    labels = [labels[i] for i in rng.permutation(len(labels))]
    hops_support = np.arange(1, len(cfg.hop_distribution) + 1)
    out = []
    for i, stratum in enumerate(labels):
        p = float(rng.uniform(*cfg.p_ranges[stratum]))
        noise = float(rng.uniform(*cfg.noise_ranges[stratum]))
        hops = int(rng.choice(hops_support, p=cfg.hop_distribution))
        distract = rng.normal(0.0, cfg.distractor_scale, size=cfg.n_distractors)
        out.append(QuestionSpec(
            id=f"{prefix}{i:05d}",
            features=question_features(p, hops, noise, cfg.max_turns, distract),
            p_param=p,
            hops_required=hops,
            noise_rate=noise,
            answer_id=f"ans{i:05d}",
            stratum=stratum,
        ))
    return out


def save_world(path, questions) -> None:
    write_jsonl(path, (q.to_dict() for q in questions))


def load_world(path) -> list:
    return [QuestionSpec.from_dict(d) for d in read_jsonl(path)]


class ToolEnvironment:
    """Answers tool calls and judges final answers.

    Pure over explicit state and generator handles; one instance can be shared
    across threads.
    """

    def __init__(self, max_turns: int = 6, poison: float = 0.25, poison_memory: bool = False):
        self.max_turns = max_turns
        self.poison = poison
        self.poison_memory = poison_memory

    @classmethod
    def from_world(cls, cfg: WorldConfig) -> "ToolEnvironment":
        return cls(cfg.max_turns, cfg.poison, cfg.poison_memory)

    def transition(self, q: QuestionSpec, s: EnvState, a: Action, rng):
        if a is not Action.TOOL_CALL:
            raise ContractViolation(f"transition called with terminal action {a.name}")
        if s.turn >= self.max_turns:
            raise BudgetError(f"{q.id}: tool budget of {self.max_turns} turns exhausted")
        if rng.random() < q.noise_rate:
            return Observation.MISLEADING, replace(s, misleading_count=s.misleading_count + 1, turn=s.turn + 1)
        return Observation.USEFUL, replace(s, useful_hops=s.useful_hops + 1, turn=s.turn + 1)

    def correct_probability(self, q: QuestionSpec, s: EnvState, terminal: Action) -> float:
        if terminal is Action.TOOL_CALL:
            raise ContractViolation("judge called with a non-terminal action")
        if terminal is Action.ANSWER_MEMORY:
            if self.poison_memory:
                return q.p_param * self.poison ** s.misleading_count
            return q.p_param
        if terminal is Action.MALFORMED:
            return 0.0
        if s.useful_hops < q.hops_required:
            return 0.0
        return self.poison ** s.misleading_count

    def judge(self, q: QuestionSpec, s: EnvState, terminal: Action, rng) -> int:
        p = self.correct_probability(q, s, terminal)
        # degenerate probabilities consume no randomness
        if p <= 0.0:
            return 0
        if p >= 1.0:
            return 1
        return int(rng.random() < p)
