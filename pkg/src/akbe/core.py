"""Shared domain types for dual-path agentic rollouts."""

from __future__ import annotations

import enum
import json
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Optional

import numpy as np


class AKBEError(Exception):
    """Base class for package errors."""


class ConfigError(AKBEError, ValueError):
    pass


class DataError(AKBEError, ValueError):
    pass


class ContractViolation(AKBEError, RuntimeError):
    pass


class BudgetError(ContractViolation):
    pass


class NumericError(AKBEError, FloatingPointError):
    pass


class Action(enum.IntEnum):
    TOOL_CALL = 0
    ANSWER_MEMORY = 1
    ANSWER_EVIDENCE = 2
    MALFORMED = 3

    @property
    def terminal(self) -> bool:
        return self is not Action.TOOL_CALL


N_ACTIONS = len(Action)


class Observation(enum.IntEnum):
    USEFUL = 0
    MISLEADING = 1


class Path(str, enum.Enum):
    WITH_TOOL = "with_tool"
    NO_TOOL = "no_tool"


class Category(enum.IntEnum):
    # order matches the metrics CSV column order
    TOOL_DEPENDENT = 0
    EFFICIENCY = 1
    HALLUCINATION = 2
    BOTH_WRONG = 3


_CATEGORY_TABLE = {
    (1, 0): Category.TOOL_DEPENDENT,
    (1, 1): Category.EFFICIENCY,
    (0, 1): Category.HALLUCINATION,
    (0, 0): Category.BOTH_WRONG,
}


def category_of(wt: int, nt: int) -> Category:
    return _CATEGORY_TABLE[(int(bool(wt)), int(bool(nt)))]


@dataclass(frozen=True)
class QuestionSpec:
    """A synthetic question whose knowledge boundary is known by construction.

    ``p_param`` is the chance that a memory answer is right, ``hops_required``
    the number of useful retrievals an evidence answer needs, and
    ``noise_rate`` the chance that a single retrieval is misleading.
    """

    id: str
    features: tuple
    p_param: float
    hops_required: int
    noise_rate: float
    answer_id: str
    stratum: str = ""

    def __post_init__(self):
        if not 0.0 <= self.p_param <= 1.0:
            raise ConfigError(f"{self.id}: p_param {self.p_param} outside [0, 1]")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError(f"{self.id}: noise_rate {self.noise_rate} outside [0, 1]")
        if self.hops_required < 0:
            raise ConfigError(f"{self.id}: hops_required must be >= 0")

    @cached_property
    def feature_array(self) -> np.ndarray:
        arr = np.asarray(self.features, dtype=float)
        arr.setflags(write=False)
        return arr

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "features": list(self.features),
            "p_param": self.p_param,
            "hops_required": self.hops_required,
            "noise_rate": self.noise_rate,
            "answer_id": self.answer_id,
            "stratum": self.stratum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuestionSpec":
        return cls(
            id=str(d["id"]),
            features=tuple(float(x) for x in d["features"]),
            p_param=float(d["p_param"]),
            hops_required=int(d["hops_required"]),
            noise_rate=float(d["noise_rate"]),
            answer_id=str(d["answer_id"]),
            stratum=str(d.get("stratum", "")),
        )


@dataclass(frozen=True)
class Step:
    action: Action
    observation: Optional[Observation]
    log_prob: float


@dataclass(frozen=True)
class Trajectory:
    question_id: str
    path: Path
    steps: tuple
    tc: int
    correct: int
    format_ok: int
    reward: int

    @property
    def actions(self) -> list:
        return [s.action for s in self.steps]

    @property
    def sampled_log_prob(self) -> float:
        return float(sum(s.log_prob for s in self.steps))

    def to_dict(self) -> dict:
        steps = []
        for s in self.steps:
            rec = {"action": s.action.name, "log_prob": s.log_prob}
            if s.observation is not None:
                rec["observation"] = s.observation.name
            steps.append(rec)
        return {
            "question_id": self.question_id,
            "path": self.path.value,
            "steps": steps,
            "tc": self.tc,
            "correct": self.correct,
            "format_ok": self.format_ok,
            "reward": self.reward,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        try:
            steps = tuple(
                Step(
                    Action[s["action"]],
                    Observation[s["observation"]] if s.get("observation") is not None else None,
                    float(s["log_prob"]),
                )
                for s in d["steps"]
            )
            return cls(
                question_id=str(d["question_id"]),
                path=Path(d["path"]),
                steps=steps,
                tc=int(d["tc"]),
                correct=int(d["correct"]),
                format_ok=int(d["format_ok"]),
                reward=int(d["reward"]),
            )
        except (KeyError, ValueError) as exc:
            raise DataError(f"malformed trajectory record: {exc}") from exc


@dataclass(frozen=True)
class RolloutGroup:
    question: QuestionSpec
    with_tool: tuple
    no_tool: tuple = ()

    def __post_init__(self):
        if any(t.path is not Path.WITH_TOOL for t in self.with_tool):
            raise ContractViolation("with_tool list holds a no-tool trajectory")
        if any(t.path is not Path.NO_TOOL for t in self.no_tool):
            raise ContractViolation("no_tool list holds a with-tool trajectory")


@dataclass(frozen=True)
class DualPathOutcome:
    question_id: str
    wt: int
    nt: int
    category: Category
    target: Optional[Trajectory] = field(default=None, compare=False)

    @property
    def kb(self) -> int:
        return self.nt


def tool_call_count(traj: Trajectory) -> int:
    return sum(1 for s in traj.steps if s.action is Action.TOOL_CALL)


def expected_reward(correct: int, format_ok: int) -> int:
    return int(bool(correct)) if format_ok else -1


def validate_trajectory(traj: Trajectory) -> Optional[str]:
    """Return ``None`` if every trajectory invariant holds, else the first violation."""
    if not traj.steps:
        return "empty trajectory"
    for i, s in enumerate(traj.steps):
        is_call = s.action is Action.TOOL_CALL
        if is_call != (s.observation is not None):
            return f"step {i}: observation must be present iff the action is a tool call"
        if not s.log_prob <= 0.0:
            return f"step {i}: log_prob {s.log_prob} > 0"
        if s.action.terminal and i != len(traj.steps) - 1:
            return f"step {i}: terminal action before the last step"
    if not traj.steps[-1].action.terminal:
        return "last step is not terminal"
    n_calls = tool_call_count(traj)
    if traj.path is Path.NO_TOOL and n_calls:
        return "tool call on no-tool path"
    if traj.tc != n_calls:
        return f"tc={traj.tc} but {n_calls} tool-call steps"
    malformed = traj.steps[-1].action is Action.MALFORMED
    if bool(traj.format_ok) == malformed:
        return "format_ok must be 0 exactly when the terminal action is malformed"
    if malformed and traj.correct:
        return "malformed answer marked correct"
    if traj.reward != expected_reward(traj.correct, traj.format_ok):
        return f"reward {traj.reward} inconsistent with (correct, format_ok)"
    return None


def check_trajectory(traj: Trajectory) -> Trajectory:
    problem = validate_trajectory(traj)
    if problem is not None:
        raise DataError(f"{traj.question_id}: {problem}")
    return traj


# -- seeded streams ---------------------------------------------------------

_PATH_CODES = {Path.WITH_TOOL: 1, Path.NO_TOOL: 2}


def _key_int(part) -> int:
    if isinstance(part, Path):
        return _PATH_CODES[part]
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFF
    return zlib.crc32(str(part).encode())


def derive_rng(seed: int, *key) -> np.random.Generator:
    """An independent generator for ``(seed, *key)``.

    Streams depend only on the key, never on call order, so serial and
    threaded execution draw identical numbers.
    """
    return np.random.default_rng(np.random.SeedSequence([_key_int(seed)] + [_key_int(k) for k in key]))


# -- JSONL ------------------------------------------------------------------

def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> Iterator[dict]:
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc


def save_trajectories(path, trajs: Iterable[Trajectory]) -> None:
    write_jsonl(path, (t.to_dict() for t in trajs))


def load_trajectories(path) -> list:
    return [Trajectory.from_dict(d) for d in read_jsonl(path)]
