"""Dual-path knowledge-boundary signals and the boundary-guided auxiliary losses.

Each question's with-tool and no-tool rollouts are compared: whether any
rollout on each path earned reward 1 decides one of four categories, and
the category decides which trajectory (if any) becomes the supervision
target. The targets feed a cross-entropy term that is added to the RL loss,
or alternatively a DPO-style preference term.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .core import (
    Category,
    ConfigError,
    DataError,
    DualPathOutcome,
    RolloutGroup,
    Trajectory,
    category_of,
    derive_rng,
)
from .policy import traj_logprob_and_grad

VARIANTS = ("ce", "dpo")
TARGET_SUPPORTS = ("agent", "sampling")


@dataclass
class AkbeConfig:
    lam: float = 0.05
    variant: str = "ce"
    dpo_beta: float = 0.1
    ce_clip: Optional[float] = None
    normalize_akbe_by_signals: bool = False
    # "agent": targets scored with the tool action available on every step;
    # "sampling": scored under the support each step was sampled with
    target_support: str = "agent"
    # category ablations; BothWrong never yields a signal
    categories: list = field(default_factory=lambda: ["tool_dependent", "efficiency", "hallucination"])

    def validate(self) -> "AkbeConfig":
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if not self.dpo_beta > 0:
            raise ConfigError("dpo_beta must be > 0")
        if self.ce_clip is not None and not self.ce_clip > 0:
            raise ConfigError("ce_clip must be > 0 when set")
        if self.target_support not in TARGET_SUPPORTS:
            raise ConfigError(f"target_support must be one of {TARGET_SUPPORTS}")
        allowed = {"tool_dependent", "efficiency", "hallucination"}
        if not set(self.categories) <= allowed:
            raise ConfigError(f"categories must be a subset of {sorted(allowed)}")
        return self

    @property
    def enabled_categories(self) -> set:
        return {Category[c.upper()] for c in self.categories}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Signal:
    question_id: str
    target: Trajectory
    category: Category


@dataclass
class SignalSet:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.question_id in seen:
                raise DataError(f"duplicate signal for {e.question_id}")
            seen.add(e.question_id)
            if e.category is Category.BOTH_WRONG:
                raise DataError(f"{e.question_id}: both-wrong questions carry no signal")
            if e.target.reward != 1:
                raise DataError(f"{e.question_id}: signal target has reward {e.target.reward}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_category(self, category: Category) -> list:
        return [e for e in self.entries if e.category is category]


def _rewarded(trajs) -> list:
    return [t for t in trajs if t.reward == 1]


def classify(group: RolloutGroup) -> DualPathOutcome:
    wt = int(any(t.reward == 1 for t in group.with_tool))
    nt = int(any(t.reward == 1 for t in group.no_tool))
    return DualPathOutcome(group.question.id, wt, nt, category_of(wt, nt))


def select_target(group: RolloutGroup, outcome: DualPathOutcome, rng) -> Optional[Trajectory]:
    """Pick the supervision target for one question.

    Tool-dependent: a rewarded with-tool rollout with the fewest tool calls,
    uniform among ties. Efficiency and hallucination: a uniform rewarded
    no-tool rollout. Both-wrong: nothing.
    """
    cat = outcome.category
    if cat is Category.BOTH_WRONG:
        return None
    if cat is Category.TOOL_DEPENDENT:
        pool = _rewarded(group.with_tool)
        best = min(t.tc for t in pool)
        pool = [t for t in pool if t.tc == best]
    else:
        pool = _rewarded(group.no_tool)
    return pool[int(rng.integers(len(pool)))]


def build_signals(groups, seed, step=0, cfg: Optional[AkbeConfig] = None):
    """Classify every group and collect targets. Returns ``(outcomes, SignalSet)``."""
    enabled = cfg.enabled_categories if cfg is not None else None
    outcomes, entries = [], []
    for g in groups:
        out = classify(g)
        target = select_target(g, out, derive_rng(seed, step, g.question.id, "select"))
        out = DualPathOutcome(out.question_id, out.wt, out.nt, out.category, target)
        outcomes.append(out)
        if target is not None and (enabled is None or out.category in enabled):
            entries.append(Signal(g.question.id, target, out.category))
    return outcomes, SignalSet(entries)


def akbe_loss_and_grad(params, signals: SignalSet, world, max_turns, ce_clip=None, normalize=False,
                       agent_support=True):
    """Negative summed log-likelihood of the selected targets.

    With ``ce_clip`` the per-target term becomes ``-min(r, clip(r, 1-e, 1+e))``
    where ``r`` is the ratio against the sampling-time probability.
    """
    loss = 0.0
    grad = np.zeros_like(params.W)
    for e in signals:
        lp, g = traj_logprob_and_grad(params, e.target, world, max_turns, agent_support=agent_support)
        if ce_clip is None:
            loss -= lp
            grad -= g
            continue
        ratio = float(np.exp(lp - e.target.sampled_log_prob))
        clipped = min(max(ratio, 1.0 - ce_clip), 1.0 + ce_clip)
        if ratio <= clipped:
            loss -= ratio
            grad -= ratio * g
        else:
            loss -= clipped
    if normalize and len(signals):
        loss /= len(signals)
        grad /= len(signals)
    return loss, grad


def total_loss(grpo_terms, akbe_terms, lam):
    """``L_total = L_rl + lam * L_aux``; gradients combine the same way."""
    l_rl, g_rl = grpo_terms
    l_aux, g_aux = akbe_terms
    return l_rl + lam * l_aux, g_rl + lam * g_aux


def lambda_default(G_wt: int) -> float:
    if G_wt < 1:
        raise ConfigError("G_wt must be >= 1")
    return 1.0 / G_wt


# -- preference-pair variant --------------------------------------------------

def select_rejected(group: RolloutGroup, preferred: Trajectory, rng) -> Optional[Trajectory]:
    """The with-tool rollout that is unrewarded or uses more tools than
    ``preferred`` and has the most tool calls; ties broken uniformly."""
    pool = [t for t in group.with_tool if t.reward != 1 or t.tc > preferred.tc]
    pool = [t for t in pool if t is not preferred]
    if not pool:
        return None
    top = max(t.tc for t in pool)
    pool = [t for t in pool if t.tc == top]
    return pool[int(rng.integers(len(pool)))]


def build_dpo_pairs(groups, signals: SignalSet, seed, step=0) -> list:
    by_id = {g.question.id: g for g in groups}
    pairs = []
    for e in signals:
        rej = select_rejected(by_id[e.question_id], e.target, derive_rng(seed, step, e.question_id, "reject"))
        if rej is not None:
            pairs.append((e.target, rej))
    return pairs


def dpo_loss_and_grad(params, ref_params, pairs, beta, world, max_turns, agent_support=True):
    """``-sum log sigmoid(beta * (delta_w - delta_l))`` with ``delta`` the
    log-ratio of a trajectory under ``params`` versus ``ref_params``."""
    loss = 0.0
    grad = np.zeros_like(params.W)
    for y_w, y_l in pairs:
        lw, gw = traj_logprob_and_grad(params, y_w, world, max_turns, agent_support=agent_support)
        ll, gl = traj_logprob_and_grad(params, y_l, world, max_turns, agent_support=agent_support)
        rw, _ = traj_logprob_and_grad(ref_params, y_w, world, max_turns, need_grad=False, agent_support=agent_support)
        rl, _ = traj_logprob_and_grad(ref_params, y_l, world, max_turns, need_grad=False, agent_support=agent_support)
        z = beta * ((lw - rw) - (ll - rl))
        loss += float(np.logaddexp(0.0, -z))
        # d/dz -log sigmoid(z) = -sigmoid(-z)
        weight = -beta * float(np.exp(-np.logaddexp(0.0, z)))
        grad += weight * (gw - gl)
    return loss, grad
