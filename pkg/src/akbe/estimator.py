"""Scikit-learn style estimator around the boundary-guided training loop."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .boundary import AkbeConfig
from .env import ToolEnvironment, WorldConfig
from .objectives import GrpoConfig
from .policy import PolicyParams
from .rollout import RolloutBudget
from .trainer import (
    TrainConfig,
    TrainState,
    eval_metrics_record,
    evaluate_questions,
    greedy_rollout,
    probe_outcomes,
    train_step,
)
from .core import derive_rng
from .validation import check_questions


class AKBEAgent(BaseEstimator):
    """Tool-use policy trained with GRPO and, optionally, boundary-guided signals.

    ``fit`` takes a list of :class:`~akbe.core.QuestionSpec`; there are no
    labels because rewards come from the environment. ``method`` selects
    plain GRPO (``"grpo"``), GRPO plus the cross-entropy boundary term
    (``"akbe"``), its preference-pair variant (``"akbe_dpo"``), or GRPO on a
    tool-count-shaped reward (``"otc"``).

    After fitting, ``params_`` holds the policy weights, ``history_`` one
    :class:`~akbe.metrics.MetricsRecord` per training step and
    ``eval_history_`` the held-out rows when ``eval_set`` was given.
    """

    def __init__(
        self,
        method="akbe",
        lam=0.05,
        G_wt=16,
        G_nt=8,
        max_turns=6,
        batch_size=16,
        steps=300,
        learning_rate=0.1,
        clip_eps=0.2,
        kl_beta=0.0,
        otc_alpha=1.0,
        dpo_beta=0.1,
        ce_clip=None,
        normalize_akbe_by_signals=False,
        target_support="agent",
        ppo_epochs=1,
        optimizer="sgd",
        freeze_signals_after=None,
        poison=0.25,
        poison_memory=False,
        init_bias=(0.0, 0.1, 0.0, -0.5),
        init_evidence_prior=4.0,
        eval_every=10,
        eval_mode="expected",
        eval_probe=True,
        cost_per_tool=5.0,
        cost_per_step=1.0,
        random_state=0,
        n_jobs=1,
    ):
        self.method = method
        self.lam = lam
        self.G_wt = G_wt
        self.G_nt = G_nt
        self.max_turns = max_turns
        self.batch_size = batch_size
        self.steps = steps
        self.learning_rate = learning_rate
        self.clip_eps = clip_eps
        self.kl_beta = kl_beta
        self.otc_alpha = otc_alpha
        self.dpo_beta = dpo_beta
        self.ce_clip = ce_clip
        self.normalize_akbe_by_signals = normalize_akbe_by_signals
        self.target_support = target_support
        self.ppo_epochs = ppo_epochs
        self.optimizer = optimizer
        self.freeze_signals_after = freeze_signals_after
        self.poison = poison
        self.poison_memory = poison_memory
        self.init_bias = init_bias
        self.init_evidence_prior = init_evidence_prior
        self.eval_every = eval_every
        self.eval_mode = eval_mode
        self.eval_probe = eval_probe
        self.cost_per_tool = cost_per_tool
        self.cost_per_step = cost_per_step
        self.random_state = random_state
        self.n_jobs = n_jobs

    # -- config bridge ---------------------------------------------------------

    @classmethod
    def from_config(cls, cfg: TrainConfig, n_jobs=1) -> "AKBEAgent":
        return cls(
            method=cfg.method,
            lam=cfg.akbe.lam,
            G_wt=cfg.budget.G_wt,
            G_nt=cfg.budget.G_nt,
            max_turns=cfg.budget.max_turns,
            batch_size=cfg.batch_size,
            steps=cfg.steps,
            learning_rate=cfg.learning_rate,
            clip_eps=cfg.grpo.clip_eps,
            kl_beta=cfg.grpo.kl_beta,
            otc_alpha=cfg.grpo.otc_alpha,
            dpo_beta=cfg.akbe.dpo_beta,
            ce_clip=cfg.akbe.ce_clip,
            normalize_akbe_by_signals=cfg.akbe.normalize_akbe_by_signals,
            target_support=cfg.akbe.target_support,
            ppo_epochs=cfg.ppo_epochs,
            optimizer=cfg.optimizer,
            freeze_signals_after=cfg.freeze_signals_after,
            poison=cfg.world.poison,
            poison_memory=cfg.world.poison_memory,
            init_bias=tuple(cfg.init_bias),
            init_evidence_prior=cfg.init_evidence_prior,
            eval_every=cfg.eval_every,
            eval_mode=cfg.eval_mode,
            eval_probe=cfg.eval_probe,
            cost_per_tool=cfg.cost_per_tool,
            cost_per_step=cfg.cost_per_step,
            random_state=cfg.seed,
            n_jobs=n_jobs,
        )

    def _train_config(self, n_questions) -> TrainConfig:
        return TrainConfig(
            world=WorldConfig(n_questions=n_questions, max_turns=self.max_turns, poison=self.poison,
                              poison_memory=self.poison_memory),
            budget=RolloutBudget(self.G_wt, self.G_nt, self.max_turns),
            grpo=GrpoConfig(self.clip_eps, self.kl_beta, "standard", self.otc_alpha),
            akbe=AkbeConfig(lam=self.lam, dpo_beta=self.dpo_beta, ce_clip=self.ce_clip,
                            normalize_akbe_by_signals=self.normalize_akbe_by_signals,
                            target_support=self.target_support),
            method=self.method,
            batch_size=self.batch_size,
            steps=self.steps,
            learning_rate=self.learning_rate,
            eval_every=self.eval_every,
            eval_mode=self.eval_mode,
            eval_probe=self.eval_probe,
            seed=self.random_state,
            freeze_signals_after=self.freeze_signals_after,
            optimizer=self.optimizer,
            ppo_epochs=self.ppo_epochs,
            init_bias=list(self.init_bias),
            init_evidence_prior=self.init_evidence_prior,
            cost_per_tool=self.cost_per_tool,
            cost_per_step=self.cost_per_step,
        ).validate().effective()

    def _env(self) -> ToolEnvironment:
        return ToolEnvironment(self.max_turns, self.poison, self.poison_memory)

    def _executor(self):
        if self.n_jobs and self.n_jobs > 1:
            return ThreadPoolExecutor(max_workers=self.n_jobs)
        return nullcontext(None)

    # -- estimator API -----------------------------------------------------------

    def fit(self, X, y=None, eval_set=None, callback=None, init_params=None):
        """Train on questions ``X``.

        ``eval_set`` is an optional held-out question list evaluated every
        ``eval_every`` steps and after the last step. ``callback(step, result)``
        is invoked after every training step.
        """
        X = check_questions(X, self.max_turns)
        evals = check_questions(eval_set, self.max_turns, len(X[0].features)) if eval_set is not None else None
        cfg = self._train_config(len(X))
        env = self._env()
        world = {q.id: q for q in X}
        dim = len(X[0].features)
        if init_params is None:
            init_params = PolicyParams.initial(dim, cfg.init_bias, cfg.init_evidence_prior)
        state = TrainState(params=init_params.copy(), ref_params=init_params.copy())
        self.n_features_in_ = dim
        self.history_ = []
        self.eval_history_ = []
        self.eval_records_ = {}
        self.outcomes_ = {}

        order_rng = derive_rng(cfg.seed, "batches")
        order = []
        with self._executor() as ex:
            for step in range(1, cfg.steps + 1):
                # leftovers are dropped so a batch never holds a question twice
                if len(order) < cfg.batch_size:
                    order = order_rng.permutation(len(X)).tolist()
                batch = [X[i] for i in order[: cfg.batch_size]]
                del order[: cfg.batch_size]
                result = train_step(state, batch, cfg, step, env, world, ex, probe_boundary=True)
                self.history_.append(result.record)
                self.outcomes_[step] = result.outcomes
                if callback is not None:
                    callback(step, result)
                if evals is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
                    self._evaluate_into(state.params, evals, cfg, env, step, ex)
        self.params_ = state.params
        self.ref_params_ = state.ref_params
        self.config_ = cfg
        return self

    def _evaluate_into(self, params, questions, cfg, env, step, executor):
        records = evaluate_questions(params, questions, env, cfg.seed, executor)
        outcomes = probe_outcomes(params, questions, cfg, env, step, executor) if cfg.eval_probe else ()
        self.eval_records_[step] = records
        self.eval_history_.append(eval_metrics_record(step, records, cfg, outcomes))

    def evaluate(self, X):
        """Per-question greedy evaluation records."""
        check_is_fitted(self, "params_")
        X = check_questions(X, self.max_turns, self.n_features_in_)
        with self._executor() as ex:
            return evaluate_questions(self.params_, X, self._env(), self.random_state, ex)

    def predict(self, X):
        """Greedy trajectories, one per question."""
        check_is_fitted(self, "params_")
        X = check_questions(X, self.max_turns, self.n_features_in_)
        env = self._env()
        return [greedy_rollout(self.params_, q, env, derive_rng(self.random_state, "eval", q.id)) for q in X]

    def predict_proba(self, X):
        """Probability that the greedy policy answers each question correctly."""
        return np.array([r.p_correct for r in self.evaluate(X)])

    def score(self, X, y=None):
        """Expected exact-match accuracy of the greedy policy."""
        return float(np.mean(self.predict_proba(X)))
