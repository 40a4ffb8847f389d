import numpy as np
import pytest

from akbe.env import ToolEnvironment, WorldConfig, generate_world
from akbe.policy import PolicyParams
from akbe.rollout import rollout_one

# criterion lines collected by the acceptance module, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# -- shared helpers ---------------------------------------------------------------

SMALL_TURNS = 5  # at most 6 steps per trajectory


def small_world(n=12, seed=0, **kw):
    """Questions with no distractor features: D' = 6 + 5 = 11."""
    cfg = WorldConfig(n_questions=n, n_distractors=0, max_turns=SMALL_TURNS, seed=seed, **kw)
    return generate_world(cfg)


def random_params(rng, dim, scale=1.0):
    return PolicyParams(scale * rng.standard_normal((4, dim)))


def sample_trajs(params, q, path, n, rng, env=None):
    env = env or ToolEnvironment(SMALL_TURNS)
    return [rollout_one(params, q, path, env, rng) for _ in range(n)]


def central_diff(f, W, h=1e-6):
    g = np.zeros_like(W)
    for idx in np.ndindex(*W.shape):
        Wp = W.copy()
        Wm = W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        g[idx] = (f(Wp) - f(Wm)) / (2 * h)
    return g


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def world():
    qs = small_world()
    return {q.id: q for q in qs}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)




def synth_traj(qid, path, tc, reward):
    """A structurally valid trajectory with the given tool count and reward."""
    from akbe.core import Action, Observation, Step, Trajectory

    steps = [Step(Action.TOOL_CALL, Observation.USEFUL, -0.1) for _ in range(tc)]
    if reward == -1:
        steps.append(Step(Action.MALFORMED, None, -0.1))
        return Trajectory(qid, path, tuple(steps), tc, 0, 0, -1)
    last = Action.ANSWER_EVIDENCE if tc else Action.ANSWER_MEMORY
    steps.append(Step(last, None, -0.1))
    return Trajectory(qid, path, tuple(steps), tc, reward, 1, reward)


# -- random small instances for gradient checks -----------------------------------

GRAD_WORLD = {q.id: q for q in small_world(12, seed=3)}
KINK_MARGIN = 1e-3


def rewarded_rollout(params, q, path, rng, tries=400):
    env = ToolEnvironment(SMALL_TURNS)
    for _ in range(tries):
        t = rollout_one(params, q, path, env, rng)
        if t.reward == 1:
            return t
    return None


def grpo_instance(rng, clipped, eps=0.2):
    """``(params, old, ref, trajs, adv)`` for one question, away from clip kinks.

    ``clipped`` perturbs the sampling policy enough that some ratios leave
    ``[1 - eps, 1 + eps]``.
    """
    from akbe.core import Path
    from akbe.policy import traj_logprob

    q = list(GRAD_WORLD.values())[int(rng.integers(len(GRAD_WORLD)))]
    while True:
        old = random_params(rng, 11)
        params = PolicyParams(old.W + (0.6 if clipped else 0.02) * rng.standard_normal(old.W.shape))
        ref = random_params(rng, 11)
        trajs = sample_trajs(old, q, Path.WITH_TOOL, 4, rng)
        ratios = np.exp([traj_logprob(params, t, q, SMALL_TURNS) - traj_logprob(old, t, q, SMALL_TURNS)
                         for t in trajs])
        if np.min(np.abs(np.subtract.outer(ratios, [1 - eps, 1 + eps]))) > KINK_MARGIN:
            adv = rng.standard_normal(len(trajs))
            return params, old, ref, trajs, adv, ratios


def signal_instance(rng, n_signals=3):
    """Random params plus a valid signal set over distinct questions."""
    from akbe.boundary import Signal, SignalSet
    from akbe.core import Category, Path

    params = random_params(rng, 11)
    entries = []
    for qid in rng.permutation(list(GRAD_WORLD)):
        path = Path.WITH_TOOL if rng.random() < 0.5 else Path.NO_TOOL
        t = rewarded_rollout(params, GRAD_WORLD[qid], path, rng)
        if t is None:
            continue
        cat = Category.TOOL_DEPENDENT if path is Path.WITH_TOOL else Category.EFFICIENCY
        entries.append(Signal(str(qid), t, cat))
        if len(entries) == n_signals:
            break
    return params, SignalSet(entries)


def dpo_instance(rng, n_pairs=2):
    from akbe.core import Path

    params = random_params(rng, 11)
    ref = random_params(rng, 11)
    pairs = []
    for qid in rng.permutation(list(GRAD_WORLD))[:n_pairs]:
        q = GRAD_WORLD[str(qid)]
        path = Path.WITH_TOOL if rng.random() < 0.5 else Path.NO_TOOL
        y_w = rewarded_rollout(params, q, path, rng) or sample_trajs(params, q, path, 1, rng)[0]
        y_l = sample_trajs(params, q, Path.WITH_TOOL, 1, rng)[0]
        pairs.append((y_w, y_l))
    return params, ref, pairs
