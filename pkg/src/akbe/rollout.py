"""With-tool and no-tool rollouts, assembled into per-question groups."""

from __future__ import annotations

from dataclasses import dataclass, asdict

from .core import (
    Action,
    ConfigError,
    Path,
    RolloutGroup,
    Step,
    Trajectory,
    derive_rng,
)
from .env import EnvState, ToolEnvironment
from .objectives import final_reward
from .policy import action_distribution, featurize, sample_action


@dataclass
class RolloutBudget:
    G_wt: int = 16
    G_nt: int = 8
    max_turns: int = 6

    def validate(self) -> "RolloutBudget":
        if self.G_wt < 1 or self.G_nt < 1 or self.max_turns < 1:
            raise ConfigError(f"rollout budget values must be >= 1: {self}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def rollout_one(params, q, path: Path, env: ToolEnvironment, rng) -> Trajectory:
    """Sample one episode. At the turn budget only terminal actions remain."""
    s = EnvState()
    steps = []
    while True:
        tool_allowed = path is Path.WITH_TOOL and s.turn < env.max_turns
        dist = action_distribution(params, featurize(q, s, env.max_turns), tool_allowed)
        action, lp = sample_action(dist, rng)
        if action is Action.TOOL_CALL:
            assert tool_allowed
            obs, s = env.transition(q, s, action, rng)
            steps.append(Step(action, obs, lp))
            continue
        steps.append(Step(action, None, lp))
        correct = env.judge(q, s, action, rng)
        format_ok = 0 if action is Action.MALFORMED else 1
        return Trajectory(
            question_id=q.id,
            path=path,
            steps=tuple(steps),
            tc=s.turn,
            correct=correct,
            format_ok=format_ok,
            reward=final_reward(correct, format_ok),
        )


def rollout_with_tool(params, q, budget: RolloutBudget, env, seed, step=0) -> list:
    return [
        rollout_one(params, q, Path.WITH_TOOL, env, derive_rng(seed, step, q.id, Path.WITH_TOOL, i))
        for i in range(budget.G_wt)
    ]


def rollout_no_tool(params, q, budget: RolloutBudget, env, seed, step=0) -> list:
    return [
        rollout_one(params, q, Path.NO_TOOL, env, derive_rng(seed, step, q.id, Path.NO_TOOL, i))
        for i in range(budget.G_nt)
    ]


def run_dual_path(params, q, budget: RolloutBudget, env, seed, step=0, with_no_tool=True) -> RolloutGroup:
    wt = rollout_with_tool(params, q, budget, env, seed, step)
    nt = rollout_no_tool(params, q, budget, env, seed, step) if with_no_tool else []
    return RolloutGroup(q, tuple(wt), tuple(nt))
