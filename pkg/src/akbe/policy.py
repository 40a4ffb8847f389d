"""Linear-softmax action policy with exact log-probabilities and gradients."""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass

import numpy as np

from .core import (
    Action,
    ConfigError,
    ContractViolation,
    DataError,
    N_ACTIONS,
    Observation,
    Path,
    QuestionSpec,
    Trajectory,
)
from .env import EnvState

N_STATE_FEATURES = 5
STATE_FEATURE_NAMES = ("turn_frac", "has_useful", "sufficient_evidence", "misleading", "bias")

_TOOL_MASK = np.ones(N_ACTIONS, dtype=bool)
_NO_TOOL_MASK = _TOOL_MASK.copy()
_NO_TOOL_MASK[Action.TOOL_CALL] = False


def support_mask(tool_allowed: bool) -> np.ndarray:
    return _TOOL_MASK if tool_allowed else _NO_TOOL_MASK


@dataclass
class PolicyParams:
    W: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        if self.W.ndim != 2 or self.W.shape[0] != N_ACTIONS:
            raise ConfigError(f"W must have shape ({N_ACTIONS}, D'), got {self.W.shape}")
        if not np.all(np.isfinite(self.W)):
            raise ConfigError("W has non-finite entries")

    @property
    def n_features(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.W.copy())

    @classmethod
    def zeros(cls, question_dim: int) -> "PolicyParams":
        return cls(np.zeros((N_ACTIONS, question_dim + N_STATE_FEATURES)))

    @classmethod
    def initial(cls, question_dim: int, bias=(0.0, 0.1, 0.0, -0.5), evidence_prior: float = 4.0,
                scale: float = 0.0, rng=None) -> "PolicyParams":
        """Starting policy: per-action bias logits plus an optional push toward
        answering from evidence once the evidence is sufficient."""
        p = cls.zeros(question_dim)
        p.W[:, -1] = bias
        p.W[Action.ANSWER_EVIDENCE, question_dim + 2] = evidence_prior
        if scale:
            p.W += scale * (rng or np.random.default_rng(0)).standard_normal(p.W.shape)
        return p


# -- checkpoint format ------------------------------------------------------
# header: magic, version, action count, feature count; then float64 row-major

_MAGIC = b"AKBW"
_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def save_params(path, params: PolicyParams) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, *params.W.shape))
        fh.write(np.ascontiguousarray(params.W, dtype="<f8").tobytes())


def load_params(path) -> PolicyParams:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DataError(f"{path}: truncated checkpoint header")
        magic, version, n_act, n_feat = _HEADER.unpack(head)
        if magic != _MAGIC or version != _VERSION:
            raise DataError(f"{path}: not a policy checkpoint (magic={magic!r}, version={version})")
        body = fh.read()
    if len(body) != 8 * n_act * n_feat:
        raise DataError(f"{path}: expected {n_act}x{n_feat} weights")
    return PolicyParams(np.frombuffer(body, dtype="<f8").reshape(n_act, n_feat).copy())


# -- features and distributions ----------------------------------------------

def featurize(q: QuestionSpec, s: EnvState, max_turns: int) -> np.ndarray:
    state = (
        s.turn / max_turns,
        1.0 if s.useful_hops > 0 else 0.0,
        1.0 if s.useful_hops >= q.hops_required else 0.0,
        1.0 if s.misleading_count > 0 else 0.0,
        1.0,
    )
    return np.concatenate((q.feature_array, state))


def action_distribution(params: PolicyParams, phi: np.ndarray, tool_allowed: bool) -> np.ndarray:
    """Softmax of ``W @ phi`` over the allowed actions; masked entries are exactly 0."""
    if phi.shape != (params.W.shape[1],):
        raise ConfigError(f"feature vector of length {phi.shape} does not match W {params.W.shape}")
    logits = params.W @ phi
    if tool_allowed:
        z = np.exp(logits - logits.max())
        return z / z.sum()
    z = np.zeros(N_ACTIONS)
    sub = logits[1:]
    e = np.exp(sub - sub.max())
    z[1:] = e / e.sum()
    return z


def sample_action(dist: np.ndarray, rng):
    total = dist.sum()
    if not total > 0.0:
        raise ContractViolation("action distribution has empty support")
    cdf = np.cumsum(dist)
    u = rng.random() * cdf[-1]
    # side="right" skips zero-probability entries (their cdf equals the previous one)
    idx = int(np.searchsorted(cdf, u, side="right"))
    if idx >= N_ACTIONS:
        idx = int(np.flatnonzero(dist)[-1])
    return Action(idx), float(np.log(dist[idx]))


# -- replay ------------------------------------------------------------------

@dataclass
class ReplayContexts:
    """Per-step features, supports and actions of one trajectory, stacked row-wise."""

    phi: np.ndarray
    tool_allowed: np.ndarray
    actions: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


def replay_contexts(traj: Trajectory, q: QuestionSpec, max_turns: int, agent_support: bool = False) -> ReplayContexts:
    """Rebuild each action's context from the recorded observations.

    By default each step keeps the support it was sampled under. With
    ``agent_support`` the tool action stays in the support on either path,
    i.e. the trajectory is scored as the tool-enabled agent producing it.
    The result is cached and read-only.
    """
    return _replay(traj, q, max_turns, bool(agent_support))


# training and gradient checks rescore the same trajectories many times
@functools.lru_cache(maxsize=8192)
def _replay(traj: Trajectory, q: QuestionSpec, max_turns: int, agent_support: bool) -> ReplayContexts:
    if traj.question_id != q.id:
        raise DataError(f"trajectory for {traj.question_id} replayed against {q.id}")
    s = EnvState()
    phis, allowed_steps = [], []
    for i, step in enumerate(traj.steps):
        allowed = (agent_support or traj.path is Path.WITH_TOOL) and s.turn < max_turns
        if step.action is Action.TOOL_CALL and not allowed:
            raise DataError(f"{traj.question_id}: step {i} calls a tool where tools are unavailable")
        phis.append(featurize(q, s, max_turns))
        allowed_steps.append(allowed)
        if step.action is Action.TOOL_CALL:
            if step.observation is None:
                raise DataError(f"{traj.question_id}: step {i} tool call without observation")
            if step.observation is Observation.USEFUL:
                s = EnvState(s.useful_hops + 1, s.misleading_count, s.turn + 1)
            else:
                s = EnvState(s.useful_hops, s.misleading_count + 1, s.turn + 1)
        elif i != len(traj.steps) - 1:
            raise DataError(f"{traj.question_id}: terminal action at step {i} is not last")
    dim = len(q.features) + N_STATE_FEATURES
    ctx = ReplayContexts(
        np.array(phis).reshape(len(phis), dim),
        np.array(allowed_steps, dtype=bool),
        np.array([int(step.action) for step in traj.steps], dtype=int),
    )
    for arr in (ctx.phi, ctx.tool_allowed, ctx.actions):
        arr.setflags(write=False)
    return ctx


def context_distributions(params: PolicyParams, ctx: ReplayContexts) -> np.ndarray:
    """Row ``t`` is the action distribution at step ``t``; masked entries are exactly 0."""
    if ctx.phi.shape[1] != params.W.shape[1]:
        raise ConfigError(f"feature vectors of length {ctx.phi.shape[1]} do not match W {params.W.shape}")
    logits = ctx.phi @ params.W.T
    logits[~ctx.tool_allowed, Action.TOOL_CALL] = -np.inf
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _lookup(world, question_id) -> QuestionSpec:
    if isinstance(world, QuestionSpec):
        return world
    try:
        return world[question_id]
    except KeyError:
        raise DataError(f"question {question_id} not in world") from None


def traj_logprob_and_grad(params: PolicyParams, traj: Trajectory, world, max_turns: int,
                          contexts=None, need_grad: bool = True, agent_support: bool = False):
    """Sum of per-action log-probabilities and its gradient wrt ``W``.

    Observations are treated as fixed environment outputs and contribute no
    terms; each step's gradient is ``(onehot(a) - pi) outer phi`` on its support.
    """
    if contexts is None:
        contexts = replay_contexts(traj, _lookup(world, traj.question_id), max_turns, agent_support)
    if not len(contexts):
        return 0.0, np.zeros_like(params.W) if need_grad else None
    dist = context_distributions(params, contexts)
    rows = np.arange(len(contexts))
    pa = dist[rows, contexts.actions]
    if pa.min() <= 0.0:
        return -np.inf, np.zeros_like(params.W) if need_grad else None
    lp = float(np.log(pa).sum())
    if not need_grad:
        return lp, None
    g = -dist
    g[rows, contexts.actions] += 1.0
    return lp, g.T @ contexts.phi


def traj_logprob(params, traj, world, max_turns: int, contexts=None, agent_support=False) -> float:
    return traj_logprob_and_grad(params, traj, world, max_turns, contexts, False, agent_support)[0]


def traj_logprob_grad(params, traj, world, max_turns: int, contexts=None, agent_support=False) -> np.ndarray:
    return traj_logprob_and_grad(params, traj, world, max_turns, contexts, True, agent_support)[1]


def greedy_action(params: PolicyParams, phi: np.ndarray, tool_allowed: bool) -> Action:
    logits = params.W @ phi
    if not tool_allowed:
        return Action(1 + int(np.argmax(logits[1:])))
    return Action(int(np.argmax(logits)))
