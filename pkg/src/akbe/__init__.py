"""Boundary-guided agentic RL with dual-path rollouts on a synthetic tool world."""

from .core import (
    Action,
    Category,
    DualPathOutcome,
    Observation,
    Path,
    QuestionSpec,
    RolloutGroup,
    Step,
    Trajectory,
    tool_call_count,
    validate_trajectory,
)
from .env import EnvState, ToolEnvironment, WorldConfig, generate_world
from .estimator import AKBEAgent
from .trainer import TrainConfig

__all__ = [
    "AKBEAgent",
    "Action",
    "Category",
    "DualPathOutcome",
    "EnvState",
    "Observation",
    "Path",
    "QuestionSpec",
    "RolloutGroup",
    "Step",
    "ToolEnvironment",
    "TrainConfig",
    "Trajectory",
    "WorldConfig",
    "generate_world",
    "tool_call_count",
    "validate_trajectory",
]
