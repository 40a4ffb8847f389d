"""Outcome rewards, group-relative advantages and the clipped GRPO loss."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .core import Action, ConfigError, ContractViolation, Trajectory
from .policy import context_distributions, replay_contexts, traj_logprob_and_grad, _lookup

REWARD_MODES = ("standard", "otc_shaped")


@dataclass
class GrpoConfig:
    clip_eps: float = 0.2
    kl_beta: float = 0.0
    reward_mode: str = "standard"
    otc_alpha: float = 1.0

    def validate(self) -> "GrpoConfig":
        if not self.clip_eps > 0:
            raise ConfigError("clip_eps must be > 0")
        if self.kl_beta < 0:
            raise ConfigError("kl_beta must be >= 0")
        if self.reward_mode not in REWARD_MODES:
            raise ConfigError(f"reward_mode must be one of {REWARD_MODES}")
        if not self.otc_alpha > 0:
            raise ConfigError("otc_alpha must be > 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def em_reward(correct) -> int:
    return 1 if correct else 0


def format_indicator(traj: Trajectory) -> int:
    return 0 if traj.steps[-1].action is Action.MALFORMED else 1


def final_reward(correct, format_ok) -> int:
    return em_reward(correct) if format_ok else -1


def otc_shaped_reward(traj: Trajectory, alpha: float) -> float:
    """Stand-in tool-productivity shaping: a correct answer earns ``1 / (1 + alpha * tc)``."""
    if not alpha > 0:
        raise ConfigError("alpha must be > 0")
    r = float(traj.reward)
    if r == 1.0:
        return r / (1.0 + alpha * traj.tc)
    return r


def group_advantages(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ConfigError("group_advantages needs at least two rewards")
    std = r.std()
    # population std; zero-variance groups carry no signal
    if std < 1e-12 * max(1.0, np.abs(r).max()):
        return np.zeros_like(r)
    return (r - r.mean()) / std


def importance_ratio(params, old_params, traj, world, max_turns) -> float:
    ctx = replay_contexts(traj, _lookup(world, traj.question_id), max_turns)
    lp, _ = traj_logprob_and_grad(params, traj, world, max_turns, ctx, need_grad=False)
    lp_old, _ = traj_logprob_and_grad(old_params, traj, world, max_turns, ctx, need_grad=False)
    return float(np.exp(lp - lp_old))


def kl_and_grad(params, ref_params, traj, world, max_turns, contexts=None):
    """Exact categorical KL(pi || pi_ref) summed over the trajectory's action contexts."""
    if contexts is None:
        contexts = replay_contexts(traj, _lookup(world, traj.question_id), max_turns)
    if not len(contexts):
        return 0.0, np.zeros_like(params.W)
    p = context_distributions(params, contexts)
    p_ref = context_distributions(ref_params, contexts)
    m = p > 0
    log_ratio = np.zeros_like(p)
    log_ratio[m] = np.log(p[m]) - np.log(p_ref[m])
    kl = (p * log_ratio).sum(axis=1)
    # d KL_t / d logit_k = p_k * (log p_k - log p_ref_k - KL_t)
    dlogits = p * (log_ratio - kl[:, None])
    return max(float(kl.sum()), 0.0), dlogits.T @ contexts.phi


def kl_divergence(params, ref_params, traj, world, max_turns) -> float:
    return kl_and_grad(params, ref_params, traj, world, max_turns)[0]


def grpo_loss_and_grad(params, old_params, ref_params, trajs, advantages, cfg: GrpoConfig,
                       world, max_turns):
    """Clipped group-relative surrogate with optional KL penalty.

    ``trajs`` are the with-tool rollouts of one question and ``advantages``
    their group-relative advantages, aligned index by index.
    """
    adv = np.asarray(advantages, dtype=float)
    if len(trajs) != adv.size:
        raise ContractViolation(f"{adv.size} advantages for {len(trajs)} trajectories")
    if not trajs:
        return 0.0, np.zeros_like(params.W)
    eps = cfg.clip_eps
    total = 0.0
    grad = np.zeros_like(params.W)
    for traj, a in zip(trajs, adv):
        ctx = replay_contexts(traj, _lookup(world, traj.question_id), max_turns)
        lp, g_lp = traj_logprob_and_grad(params, traj, world, max_turns, ctx)
        if old_params is params:
            lp_old = lp
        else:
            lp_old, _ = traj_logprob_and_grad(old_params, traj, world, max_turns, ctx, need_grad=False)
        ratio = float(np.exp(lp - lp_old))
        clipped = min(max(ratio, 1.0 - eps), 1.0 + eps)
        unclipped_obj = ratio * a
        clipped_obj = clipped * a
        if unclipped_obj <= clipped_obj:
            obj = unclipped_obj
            grad -= (ratio * a) * g_lp
        else:
            obj = clipped_obj
        if cfg.kl_beta > 0:
            kl, g_kl = kl_and_grad(params, ref_params, traj, world, max_turns, ctx)
            obj -= cfg.kl_beta * kl
            grad += cfg.kl_beta * g_kl
        total -= obj
    n = len(trajs)
    return total / n, grad / n


def rewards_for_advantage(trajs, cfg: GrpoConfig) -> list:
    if cfg.reward_mode == "otc_shaped":
        return [otc_shaped_reward(t, cfg.otc_alpha) for t in trajs]
    return [float(t.reward) for t in trajs]
