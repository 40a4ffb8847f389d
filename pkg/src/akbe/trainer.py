"""One training step of boundary-guided agentic RL, plus greedy evaluation."""

from __future__ import annotations

import copy
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .boundary import (
    AkbeConfig,
    SignalSet,
    Signal,
    akbe_loss_and_grad,
    build_dpo_pairs,
    build_signals,
    dpo_loss_and_grad,
    total_loss,
)
from .core import (
    Action,
    ConfigError,
    DualPathOutcome,
    NumericError,
    Path,
    derive_rng,
    validate_trajectory,
    ContractViolation,
)
from .env import EnvState, ToolEnvironment, WorldConfig
from .metrics import (
    MetricsRecord,
    aggregate_metrics,
    category_distribution,
    cost_accounting,
)
from .objectives import GrpoConfig, group_advantages, grpo_loss_and_grad, rewards_for_advantage
from .policy import PolicyParams, featurize, greedy_action
from .rollout import RolloutBudget, rollout_one, run_dual_path

METHODS = ("grpo", "akbe", "otc", "akbe_dpo")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    budget: RolloutBudget = field(default_factory=RolloutBudget)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    akbe: AkbeConfig = field(default_factory=AkbeConfig)
    method: str = "akbe"
    batch_size: int = 16
    steps: int = 300
    learning_rate: float = 0.1
    eval_every: int = 10
    n_eval_questions: int = 200
    eval_mode: str = "expected"
    eval_probe: bool = True
    seed: int = 0
    freeze_signals_after: Optional[int] = None
    optimizer: str = "sgd"
    ppo_epochs: int = 1
    # starting logits (tool, memory, evidence, malformed): greedy answers from
    # memory; sampled rollouts still call tools and answer unsupported often
    init_bias: list = field(default_factory=lambda: [0.0, 0.1, 0.0, -0.5])
    init_evidence_prior: float = 4.0
    cost_per_tool: float = 5.0
    cost_per_step: float = 1.0
    check_on_policy: bool = True

    def validate(self) -> "TrainConfig":
        self.world.validate()
        self.budget.validate()
        self.grpo.validate()
        self.akbe.validate()
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not 1 <= self.batch_size <= self.world.n_questions:
            raise ConfigError("batch_size must lie in [1, world.n_questions]")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.eval_every < 1 or self.n_eval_questions < 1:
            raise ConfigError("eval_every and n_eval_questions must be >= 1")
        if self.eval_mode not in ("expected", "sampled"):
            raise ConfigError("eval_mode must be 'expected' or 'sampled'")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.ppo_epochs < 1:
            raise ConfigError("ppo_epochs must be >= 1")
        if self.budget.max_turns != self.world.max_turns:
            raise ConfigError("budget.max_turns and world.max_turns must agree")
        if self.method in ("grpo", "akbe", "akbe_dpo") and self.grpo.reward_mode != "standard":
            raise ConfigError(f"method {self.method} uses the standard reward")
        if len(self.init_bias) != 4:
            raise ConfigError("init_bias needs one logit per action")
        return self

    def effective(self) -> "TrainConfig":
        """Copy with method-implied settings applied."""
        cfg = copy.deepcopy(self)
        if cfg.method == "otc":
            cfg.grpo.reward_mode = "otc_shaped"
        if cfg.method == "akbe_dpo":
            cfg.akbe.variant = "dpo"
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"world": WorldConfig, "budget": RolloutBudget, "grpo": GrpoConfig, "akbe": AkbeConfig}
        kwargs = {}
        for key, typ in nested.items():
            sub = d.pop(key, None) or {}
            unknown = set(sub) - set(typ.__dataclass_fields__)
            if unknown:
                raise ConfigError(f"unknown keys in {key}: {sorted(unknown)}")
            kwargs[key] = typ(**sub)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs, **d)

    @property
    def uses_boundary(self) -> bool:
        return self.method in ("akbe", "akbe_dpo")


@dataclass
class TrainState:
    params: PolicyParams
    ref_params: PolicyParams
    adam_m: Optional[np.ndarray] = None
    adam_v: Optional[np.ndarray] = None
    adam_t: int = 0
    # frozen-signal ablation: question_id -> Signal
    signal_cache: dict = field(default_factory=dict)


@dataclass
class StepResult:
    params: PolicyParams
    record: MetricsRecord
    outcomes: list
    groups: list
    signals: SignalSet


def _check_finite(value, what, where):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite {what} for {where}")


def _map(executor, fn, items):
    if executor is None:
        return [fn(x) for x in items]
    return list(executor.map(fn, items))


def _apply_update(state: TrainState, grad: np.ndarray, cfg: TrainConfig) -> PolicyParams:
    lr = cfg.learning_rate
    if cfg.optimizer == "sgd":
        return PolicyParams(state.params.W - lr * grad)
    b1, b2, eps = 0.9, 0.999, 1e-8
    if state.adam_m is None:
        state.adam_m = np.zeros_like(grad)
        state.adam_v = np.zeros_like(grad)
    state.adam_t += 1
    state.adam_m = b1 * state.adam_m + (1 - b1) * grad
    state.adam_v = b2 * state.adam_v + (1 - b2) * grad * grad
    m_hat = state.adam_m / (1 - b1 ** state.adam_t)
    v_hat = state.adam_v / (1 - b2 ** state.adam_t)
    return PolicyParams(state.params.W - lr * m_hat / (np.sqrt(v_hat) + eps))


def train_step(state: TrainState, batch, cfg: TrainConfig, step: int, env: ToolEnvironment,
               world: dict, executor=None, probe_boundary: bool = True) -> StepResult:
    """Rollouts, signal construction, joint loss and one parameter update for a batch.

    Methods ``grpo`` and ``otc`` train on with-tool rollouts only; when
    ``probe_boundary`` is set they still draw no-tool rollouts so category
    statistics can be reported, but those rollouts never enter the loss and
    are not charged as cost.
    """
    params = state.params
    boundary = cfg.uses_boundary
    frozen = boundary and cfg.freeze_signals_after is not None and step > cfg.freeze_signals_after
    want_nt = (boundary and not frozen) or probe_boundary

    groups = _map(executor, lambda q: run_dual_path(params, q, cfg.budget, env, cfg.seed, step, want_nt), batch)

    for g in groups:
        for t in g.with_tool + g.no_tool:
            problem = validate_trajectory(t)
            if problem is not None:
                raise ContractViolation(f"{t.question_id}: {problem}")

    seed = cfg.seed
    if want_nt:
        outcomes, signals = build_signals(groups, seed, step, cfg.akbe)
    else:
        outcomes, signals = [], SignalSet()
    if boundary and frozen:
        signals = SignalSet([state.signal_cache[q.id] for q in batch if q.id in state.signal_cache])
    elif boundary:
        for e in signals:
            state.signal_cache[e.question_id] = e
    if not boundary:
        signals = SignalSet()

    advantages = [group_advantages(rewards_for_advantage(g.with_tool, cfg.grpo)) for g in groups]
    mt = cfg.budget.max_turns
    agent_support = cfg.akbe.target_support == "agent"
    old_params = params
    dpo_pairs = build_dpo_pairs(groups, signals, seed, step) if boundary and cfg.akbe.variant == "dpo" else []

    for epoch in range(cfg.ppo_epochs):
        cur = state.params

        def per_question(i):
            g = groups[i]
            old = cur if epoch == 0 else old_params
            loss, grad = grpo_loss_and_grad(cur, old, state.ref_params, list(g.with_tool), advantages[i],
                                            cfg.grpo, world, mt)
            return loss, grad

        terms = _map(executor, per_question, range(len(groups)))
        l_grpo = 0.0
        g_grpo = np.zeros_like(cur.W)
        for i, (l, g) in enumerate(terms):
            _check_finite(l, "GRPO loss", groups[i].question.id)
            _check_finite(g, "GRPO gradient", groups[i].question.id)
            l_grpo += l
            g_grpo += g
        # expectation over questions: batch mean; the boundary term stays a sum over targets
        l_grpo /= len(groups)
        g_grpo /= len(groups)

        if boundary and cfg.akbe.variant == "dpo":
            l_aux, g_aux = dpo_loss_and_grad(cur, state.ref_params, dpo_pairs, cfg.akbe.dpo_beta, world, mt,
                                             agent_support)
        elif boundary:
            l_aux, g_aux = akbe_loss_and_grad(cur, signals, world, mt, cfg.akbe.ce_clip,
                                              cfg.akbe.normalize_akbe_by_signals, agent_support)
        else:
            l_aux, g_aux = 0.0, np.zeros_like(cur.W)
        _check_finite(l_aux, "boundary loss", f"step {step}")
        _check_finite(g_aux, "boundary gradient", f"step {step}")

        lam = cfg.akbe.lam if boundary else 0.0
        if boundary:
            l_total, g_total = total_loss((l_grpo, g_grpo), (l_aux, g_aux), lam)
        else:
            l_total, g_total = l_grpo, g_grpo
        if epoch == 0:
            record_losses = (l_grpo, l_aux, l_total)
        state.params = _apply_update(state, g_total, cfg)

    if cfg.check_on_policy:
        # replayed log-probabilities must match sampling time (epoch-0 ratios are exactly 1)
        from .policy import traj_logprob

        for g in groups[:1]:
            for t in g.with_tool[:2]:
                lp = traj_logprob(old_params, t, world, mt)
                if abs(lp - t.sampled_log_prob) > 1e-10:
                    raise NumericError(f"{t.question_id}: replayed log-prob {lp} != sampled {t.sampled_log_prob}")

    wt_trajs = [t for g in groups for t in g.with_tool]
    em, mean_tc, tp = aggregate_metrics((t.reward == 1, t.tc) for t in wt_trajs)
    charged = wt_trajs + ([t for g in groups for t in g.no_tool] if boundary and not frozen else [])
    record = MetricsRecord(
        step=step,
        em=em,
        mean_tc=mean_tc,
        tp=tp,
        category_fractions=category_distribution(outcomes) if outcomes else (0.0, 0.0, 0.0, 1.0),
        mean_reward=float(np.mean([t.reward for t in wt_trajs])),
        signal_count=len(signals),
        cost_units=cost_accounting(charged, cfg.cost_per_tool, cfg.cost_per_step),
        loss_grpo=record_losses[0],
        loss_akbe=record_losses[1],
        loss_total=record_losses[2],
    )
    return StepResult(state.params, record, outcomes, groups, signals)


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalRecord:
    question_id: str
    correct: int
    tc: int
    p_correct: float
    expected_tc: float
    expected_reward: float

    def to_dict(self) -> dict:
        return asdict(self)


def _greedy_expectation(params, q, s: EnvState, env: ToolEnvironment):
    allowed = s.turn < env.max_turns
    a = greedy_action(params, featurize(q, s, env.max_turns), allowed)
    if a is not Action.TOOL_CALL:
        pc = env.correct_probability(q, s, a)
        return pc, float(s.turn), (-1.0 if a is Action.MALFORMED else pc)
    outs = []
    if q.noise_rate < 1.0:
        outs.append((1.0 - q.noise_rate, EnvState(s.useful_hops + 1, s.misleading_count, s.turn + 1)))
    if q.noise_rate > 0.0:
        outs.append((q.noise_rate, EnvState(s.useful_hops, s.misleading_count + 1, s.turn + 1)))
    pc = tc = rw = 0.0
    for w, nxt in outs:
        a_, b_, c_ = _greedy_expectation(params, q, nxt, env)
        pc += w * a_
        tc += w * b_
        rw += w * c_
    return pc, tc, rw


def greedy_rollout(params, q, env: ToolEnvironment, rng):
    from .core import Step, Trajectory
    from .objectives import final_reward

    s = EnvState()
    steps = []
    while True:
        allowed = s.turn < env.max_turns
        a = greedy_action(params, featurize(q, s, env.max_turns), allowed)
        if a is Action.TOOL_CALL:
            obs, s = env.transition(q, s, a, rng)
            steps.append(Step(a, obs, 0.0))
            continue
        steps.append(Step(a, None, 0.0))
        correct = env.judge(q, s, a, rng)
        fmt = 0 if a is Action.MALFORMED else 1
        return Trajectory(q.id, Path.WITH_TOOL, tuple(steps), s.turn, correct, fmt, final_reward(correct, fmt))


def evaluate_questions(params, questions, env: ToolEnvironment, seed, executor=None) -> list:
    """Greedy evaluation. Sampled outcomes use a per-question stream that does
    not depend on the checkpoint, so checkpoints share environment draws."""

    def one(q):
        pc, etc, erw = _greedy_expectation(params, q, EnvState(), env)
        t = greedy_rollout(params, q, env, derive_rng(seed, "eval", q.id))
        return EvalRecord(q.id, int(t.reward == 1), t.tc, pc, etc, erw)

    return _map(executor, one, questions)


def eval_metrics_record(step, records, cfg: TrainConfig, outcomes=()) -> MetricsRecord:
    if cfg.eval_mode == "expected":
        em, mean_tc, tp = aggregate_metrics((r.p_correct, r.expected_tc) for r in records)
        mean_reward = float(np.mean([r.expected_reward for r in records]))
    else:
        em, mean_tc, tp = aggregate_metrics((r.correct, r.tc) for r in records)
        mean_reward = em
    fracs = category_distribution(outcomes) if outcomes else (0.0, 0.0, 0.0, 1.0)
    return MetricsRecord(step=step, em=em, mean_tc=mean_tc, tp=tp, category_fractions=fracs,
                         mean_reward=mean_reward, phase="eval")


def probe_outcomes(params, questions, cfg: TrainConfig, env, step, executor=None) -> list:
    """Dual-path classification of held-out questions (metrics only)."""
    from .boundary import classify

    groups = _map(executor, lambda q: run_dual_path(params, q, cfg.budget, env, cfg.seed + 7919, step), questions)
    return [classify(g) for g in groups]
