import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from akbe.core import ConfigError, ContractViolation, Path
from akbe.objectives import (
    GrpoConfig,
    final_reward,
    format_indicator,
    group_advantages,
    grpo_loss_and_grad,
    importance_ratio,
    kl_and_grad,
    otc_shaped_reward,
    rewards_for_advantage,
)
from akbe.policy import PolicyParams

from conftest import (
    GRAD_WORLD,
    SMALL_TURNS,
    central_diff,
    grpo_instance,
    rel_err,
    random_params,
    sample_trajs,
    synth_traj,
)


def test_reward_components():
    assert final_reward(1, 1) == 1
    assert final_reward(0, 1) == 0
    assert final_reward(1, 0) == -1
    assert format_indicator(synth_traj("q", Path.WITH_TOOL, 0, -1)) == 0
    assert format_indicator(synth_traj("q", Path.WITH_TOOL, 2, 1)) == 1


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from([-1.0, 0.0, 1.0]), min_size=2, max_size=32))
def test_advantages_are_standardized(rewards):
    a = group_advantages(rewards)
    if np.std(rewards) > 0:
        assert abs(a.mean()) < 1e-9
        assert abs(a.std() - 1.0) < 1e-9
    else:
        assert np.all(a == 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=16), st.floats(-3, 3), st.floats(0.1, 4))
def test_advantages_invariant_to_affine_reward_change(rewards, shift, scale):
    a = group_advantages(rewards)
    b = group_advantages([scale * r + shift for r in rewards])
    assert np.allclose(a, b, atol=1e-6)


def test_advantages_need_a_group():
    with pytest.raises(ConfigError):
        group_advantages([1.0])


def test_otc_shaping():
    assert otc_shaped_reward(synth_traj("q", Path.WITH_TOOL, 0, 1), 1.0) == 1.0
    assert otc_shaped_reward(synth_traj("q", Path.WITH_TOOL, 3, 1), 1.0) == 0.25
    assert otc_shaped_reward(synth_traj("q", Path.WITH_TOOL, 3, 0), 1.0) == 0.0
    assert otc_shaped_reward(synth_traj("q", Path.WITH_TOOL, 3, -1), 1.0) == -1.0
    trajs = [synth_traj("q", Path.WITH_TOOL, k, 1) for k in range(3)]
    assert rewards_for_advantage(trajs, GrpoConfig(reward_mode="otc_shaped", otc_alpha=0.5)) == pytest.approx([1.0, 2 / 3, 0.5])
    assert rewards_for_advantage(trajs, GrpoConfig()) == [1.0, 1.0, 1.0]


def test_grpo_on_policy_loss_is_negative_mean_advantage():
    rng = np.random.default_rng(0)
    params = random_params(rng, 11)
    q = GRAD_WORLD["q00000"]
    trajs = sample_trajs(params, q, Path.WITH_TOOL, 6, rng)
    adv = rng.standard_normal(6)
    loss, _ = grpo_loss_and_grad(params, params, params, trajs, adv, GrpoConfig(), GRAD_WORLD, SMALL_TURNS)
    assert loss == pytest.approx(-adv.mean())


def test_grpo_zero_advantages_give_zero_gradient():
    rng = np.random.default_rng(1)
    params = random_params(rng, 11)
    trajs = sample_trajs(params, GRAD_WORLD["q00001"], Path.WITH_TOOL, 4, rng)
    loss, grad = grpo_loss_and_grad(params, params, params, trajs, np.zeros(4), GrpoConfig(), GRAD_WORLD,
                                    SMALL_TURNS)
    assert loss == 0.0
    assert not grad.any()


def test_grpo_rejects_misaligned_advantages():
    rng = np.random.default_rng(2)
    params = random_params(rng, 11)
    trajs = sample_trajs(params, GRAD_WORLD["q00001"], Path.WITH_TOOL, 3, rng)
    with pytest.raises(ContractViolation):
        grpo_loss_and_grad(params, params, params, trajs, np.zeros(4), GrpoConfig(), GRAD_WORLD, SMALL_TURNS)


def test_clipped_terms_carry_no_gradient():
    rng = np.random.default_rng(3)
    cfg = GrpoConfig(clip_eps=0.2)
    for _ in range(50):
        params, old, ref, trajs, adv, ratios = grpo_instance(rng, clipped=True)
        active = [(r > 1.2 and a > 0) or (r < 0.8 and a < 0) for r, a in zip(ratios, adv)]
        if all(active):
            _, grad = grpo_loss_and_grad(params, old, ref, trajs, adv, cfg, GRAD_WORLD, SMALL_TURNS)
            assert not grad.any()
            return
    pytest.fail("no fully clipped instance drawn")


def test_importance_ratio():
    rng = np.random.default_rng(4)
    params, old, _, trajs, _, ratios = grpo_instance(rng, clipped=True)
    assert importance_ratio(params, old, trajs[0], GRAD_WORLD, SMALL_TURNS) == pytest.approx(ratios[0])
    assert importance_ratio(params, params, trajs[0], GRAD_WORLD, SMALL_TURNS) == 1.0


def test_kl_is_nonnegative_and_zero_at_reference():
    rng = np.random.default_rng(5)
    for _ in range(20):
        params = random_params(rng, 11)
        ref = random_params(rng, 11)
        t = sample_trajs(params, GRAD_WORLD["q00002"], Path.WITH_TOOL, 1, rng)[0]
        kl, _ = kl_and_grad(params, ref, t, GRAD_WORLD, SMALL_TURNS)
        assert kl >= 0.0
        kl0, g0 = kl_and_grad(params, params, t, GRAD_WORLD, SMALL_TURNS)
        assert kl0 == pytest.approx(0.0, abs=1e-12)
        assert np.allclose(g0, 0.0)


@pytest.mark.parametrize("beta", [0.0, 0.04])
@pytest.mark.parametrize("clipped", [False, True])
def test_grpo_gradient_matches_finite_differences(beta, clipped):
    rng = np.random.default_rng(int(beta * 100) + 7 * clipped)
    cfg = GrpoConfig(kl_beta=beta)
    for _ in range(5):
        params, old, ref, trajs, adv, _ = grpo_instance(rng, clipped)
        _, g = grpo_loss_and_grad(params, old, ref, trajs, adv, cfg, GRAD_WORLD, SMALL_TURNS)
        fd = central_diff(
            lambda W: grpo_loss_and_grad(PolicyParams(W), old, ref, trajs, adv, cfg, GRAD_WORLD, SMALL_TURNS)[0],
            params.W)
        assert rel_err(g, fd) < 1e-5


def test_grpo_config_validation():
    with pytest.raises(ConfigError):
        GrpoConfig(clip_eps=0).validate()
    with pytest.raises(ConfigError):
        GrpoConfig(kl_beta=-1).validate()
    with pytest.raises(ConfigError):
        GrpoConfig(reward_mode="other").validate()
