#!/usr/bin/env python3
"""
ppo 測試：GAE、timeout bootstrap、clip 損失、學習率排程、更新語意
"""

import math
import os
import sys

import numpy as np
import pytest

# 添加當前目錄到Python路徑
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from autodiff import Tape
from envs import ConstantRewardEnv, PendulumEnv, SparseChainEnv
from errors import ConfigError
from networks import GaussianActorCritic, NetworkConfig, policy_evaluate
from optim import Adam, clip_grad_norm, grad_norm
from ppo import (
    LR_MAX,
    LR_MIN,
    PPO,
    EpisodeTracker,
    Minibatch,
    PpoConfig,
    RolloutBuffer,
    RolloutState,
    adapt_lr,
    build_batch,
    collect_rollout,
    compute_gae,
    explained_variance,
    ppo_loss,
    update,
)


def make_buffer(rewards, values, bootstrap, terminated=None, timeouts=None):
    rewards = np.asarray(rewards, dtype=np.float32)
    T, B = rewards.shape
    terminated = np.zeros((T, B), dtype=bool) if terminated is None else np.asarray(terminated, dtype=bool)
    timeouts = np.zeros((T, B), dtype=bool) if timeouts is None else np.asarray(timeouts, dtype=bool)
    return RolloutBuffer(
        obs={"policy": np.zeros((T, B, 1), dtype=np.float32)},
        actions=np.zeros((T, B, 1), dtype=np.float32),
        rewards=rewards,
        values=np.asarray(values, dtype=np.float32),
        log_probs=np.zeros((T, B), dtype=np.float32),
        terminated=terminated,
        timeouts=timeouts,
        reset_mask=np.zeros((T, B), dtype=np.float32),
        bootstrap_value=np.asarray(bootstrap, dtype=np.float32),
    )


def brute_force_advantages(buf, gamma, lam):
    T, B = buf.rewards.shape
    r = buf.rewards.astype(np.float64)
    v = buf.values.astype(np.float64)
    done = buf.dones
    adv = np.zeros((T, B))
    for b in range(B):
        for t in range(T):
            total, weight = 0.0, 1.0
            for k in range(t, T):
                next_v = buf.bootstrap_value[b] if k == T - 1 else v[k + 1, b]
                delta = r[k, b] + (0.0 if done[k, b] else gamma * next_v) - v[k, b]
                total += weight * delta
                if done[k, b]:
                    break
                weight *= gamma * lam
            adv[t, b] = total
    return adv


def make_net(recurrent=False, seed=0, obs_dims=None, action_dim=1):
    cfg = NetworkConfig(hidden_sizes=[16, 16], recurrent=recurrent, hidden_dim=8)
    return GaussianActorCritic(obs_dims or {"policy": 3, "critic": 3}, action_dim, cfg, seed=seed)


def pendulum_buffer(net, B=8, T=8, seed=0):
    env = PendulumEnv(B, seed=seed)
    state = RolloutState.initial(env, net)
    buf = collect_rollout(env, net, T, state, np.random.default_rng(seed))
    return compute_gae(buf, 0.99, 0.95)


# ===============
# GAE
# ===============


def test_gae_hand_example():
    buf = compute_gae(make_buffer([[1], [1], [1]], [[0.5]] * 3, [0.5]), 0.9, 0.95)
    np.testing.assert_allclose(buf.advantages[:, 0], [2.45672375, 1.76225, 0.95], atol=1e-6)
    np.testing.assert_allclose(buf.returns, buf.advantages + 0.5, atol=1e-6)


def test_gae_gamma_zero_is_one_step():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    buf = compute_gae(make_buffer(r, v, rng.normal(size=3)), 0.0, 0.95)
    np.testing.assert_allclose(buf.advantages, r.astype(np.float32) - v.astype(np.float32), atol=1e-6)


def test_gae_done_decouples_episodes():
    terminated = [[False], [True], [False]]
    a = compute_gae(make_buffer([[1], [1], [1]], [[0.2]] * 3, [0.3], terminated), 0.99, 0.95)
    b = compute_gae(make_buffer([[1], [1], [7]], [[0.2]] * 3, [0.3], terminated), 0.99, 0.95)
    assert a.advantages[0, 0] == b.advantages[0, 0]
    assert a.advantages[2, 0] != b.advantages[2, 0]


def test_gae_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        T, B = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        gamma, lam = float(rng.uniform(0.5, 1.0)), float(rng.uniform(0.0, 1.0))
        term = rng.random((T, B)) < 0.15
        tout = (rng.random((T, B)) < 0.15) & ~term
        buf = make_buffer(rng.normal(size=(T, B)), rng.normal(size=(T, B)), rng.normal(size=B), term, tout)
        compute_gae(buf, gamma, lam)
        np.testing.assert_allclose(buf.advantages, brute_force_advantages(buf, gamma, lam), atol=1e-6)


def test_explained_variance():
    assert explained_variance(np.zeros(4), np.ones(4)) is None
    assert explained_variance(np.arange(4.0), np.arange(4.0)) == 1.0


# ===============
# Rollout 與 timeout bootstrap
# ===============


def constant_critic(net, c):
    for w, b in net.critic.layers:
        w.data[...] = 0
        b.data[...] = 0
    net.critic.layers[-1][1].data[:] = c


def test_timeout_reward_folds_in_bootstrap():
    env = ConstantRewardEnv(16, seed=0)
    net = make_net(obs_dims=env.obs_schema)
    constant_critic(net, 7.0)
    state = RolloutState.initial(env, net)
    buf = collect_rollout(env, net, 60, state, np.random.default_rng(0), gamma=0.99)
    assert buf.timeouts.any()
    expected = np.float32(1.0) + np.float32(0.99) * np.float32(7.0)
    np.testing.assert_allclose(buf.rewards[buf.timeouts], expected, rtol=1e-6)
    np.testing.assert_array_equal(buf.rewards[~buf.timeouts], 1.0)
    np.testing.assert_allclose(buf.bootstrap_value, 7.0)


def test_timeout_bootstrap_can_be_disabled():
    env = ConstantRewardEnv(16, seed=0)
    net = make_net(obs_dims=env.obs_schema)
    constant_critic(net, 7.0)
    state = RolloutState.initial(env, net)
    buf = collect_rollout(env, net, 60, state, np.random.default_rng(0), bootstrap_timeouts=False)
    assert buf.timeouts.any()
    np.testing.assert_array_equal(buf.rewards, 1.0)


def test_termination_gets_no_bootstrap():
    env = SparseChainEnv(4, seed=0, random_episode_start=False)
    net = make_net(obs_dims=env.obs_schema)
    constant_critic(net, 5.0)
    net.actor.layers[-1][1].data[:] = 1.0
    net.log_std.data[:] = -10.0
    state = RolloutState.initial(env, net)
    env.state[:, 0] = 9.45
    buf = collect_rollout(env, net, 1, state, np.random.default_rng(0))
    assert buf.terminated.all() and not buf.timeouts.any()
    np.testing.assert_array_equal(buf.rewards, 1.0)
    np.testing.assert_array_equal(buf.bootstrap_value, 0.0)
    np.testing.assert_array_equal(state.episode_start, 1.0)


def test_reset_mask_follows_dones():
    env = ConstantRewardEnv(8, seed=3)
    net = make_net(obs_dims=env.obs_schema)
    state = RolloutState.initial(env, net)
    buf = collect_rollout(env, net, 30, state, np.random.default_rng(0))
    np.testing.assert_array_equal(buf.reset_mask[0], 1.0)
    np.testing.assert_array_equal(buf.reset_mask[1:], buf.dones[:-1].astype(np.float32))
    assert len(buf) == 30 * 8
    assert buf.obs["critic"].shape == (30, 8, 2)


def test_recurrent_rollout_keeps_hidden_start():
    net = make_net(recurrent=True)
    env = PendulumEnv(4, seed=0)
    state = RolloutState.initial(env, net)
    collect_rollout(env, net, 5, state, np.random.default_rng(0))
    h = state.hidden.copy()
    buf = collect_rollout(env, net, 5, state, np.random.default_rng(1))
    np.testing.assert_array_equal(buf.hidden_start, h)
    assert state.hidden.shape == (4, 8)


def test_episode_tracker():
    tracker = EpisodeTracker(2)
    tracker.record(np.array([1.0, 2.0]), np.array([False, True]), np.array([False, True]))
    tracker.record(np.array([1.0, 2.0]), np.array([True, False]), np.array([False, False]))
    summary = tracker.drain()
    assert summary.count == 2
    assert summary.mean_return == 2.0
    assert summary.mean_length == 1.5
    assert summary.success_rate == 0.5
    assert tracker.drain().count == 0


# ===============
# 損失
# ===============


def random_minibatch(net, n=32, seed=0, log_ratio_scale=0.0):
    rng = np.random.default_rng(seed)
    obs = {"policy": rng.normal(size=(n, 3)).astype(np.float32),
           "critic": rng.normal(size=(n, 3)).astype(np.float32)}
    actions = rng.normal(size=(n, 1)).astype(np.float32)
    ev = policy_evaluate(net, obs, actions)
    old_lp = ev.log_prob.data - log_ratio_scale * rng.normal(size=n).astype(np.float32)
    return Minibatch(
        obs=obs,
        actions=actions,
        old_log_probs=old_lp.astype(np.float32),
        advantages=rng.normal(size=n).astype(np.float32),
        returns=rng.normal(size=n).astype(np.float32),
        old_values=(ev.value.data + 0.3 * rng.normal(size=n)).astype(np.float32),
    ), ev


def test_loss_identity_at_old_params():
    net = make_net()
    mb, _ = random_minibatch(net)
    _, stats = ppo_loss(mb, net, PpoConfig())
    assert abs(stats["surrogate_loss"] + float(mb.advantages.mean())) < 1e-6
    assert stats["approx_kl"] == 0.0
    assert stats["clip_fraction"] == 0.0


def test_single_sample_clipped_branch():
    net = make_net()
    mb, ev = random_minibatch(net, n=1)
    mb.advantages[:] = 2.0
    mb.old_log_probs[:] = ev.log_prob.data - np.float32(math.log(1.5))
    _, stats = ppo_loss(mb, net, PpoConfig(clip_eps=0.2))
    assert abs(stats["surrogate_loss"] + 2.4) < 1e-5
    assert stats["clip_fraction"] == 1.0


def test_loss_matches_scalar_reimplementation():
    net = make_net()
    cfg = PpoConfig()
    for seed in range(100):
        mb, ev = random_minibatch(net, n=16, seed=seed, log_ratio_scale=0.3)
        if seed % 2:
            mb.advantages = -mb.advantages
        _, stats = ppo_loss(mb, net, cfg)

        new_lp = ev.log_prob.data.astype(np.float64)
        v = ev.value.data.astype(np.float64)
        surr, vloss, kl = 0.0, 0.0, 0.0
        for i in range(16):
            rho = math.exp(new_lp[i] - mb.old_log_probs[i])
            a = float(mb.advantages[i])
            surr += -min(rho * a, min(max(rho, 0.8), 1.2) * a)
            vc = mb.old_values[i] + min(max(v[i] - mb.old_values[i], -0.2), 0.2)
            vloss += max((v[i] - mb.returns[i]) ** 2, (vc - mb.returns[i]) ** 2)
            kl += rho - 1.0 - (new_lp[i] - mb.old_log_probs[i])
        assert abs(stats["surrogate_loss"] - surr / 16) < 1e-4
        assert abs(stats["value_loss"] - vloss / 16) < 1e-4
        assert abs(stats["approx_kl"] - kl / 16) < 1e-5
        assert stats["approx_kl"] >= -1e-6


def test_unclipped_value_loss():
    net = make_net()
    mb, ev = random_minibatch(net, seed=3)
    _, stats = ppo_loss(mb, net, PpoConfig(clip_value_loss=False))
    expected = float(np.mean((ev.value.data.astype(np.float64) - mb.returns) ** 2))
    assert abs(stats["value_loss"] - expected) < 1e-5


def test_recurrent_sequence_path_matches_flat_path():
    net = make_net(recurrent=True, action_dim=2, obs_dims={"policy": 3, "critic": 4})
    rng = np.random.default_rng(0)
    T, B = 4, 3

    def arr(*shape):
        return rng.normal(size=shape).astype(np.float32)

    seq = Minibatch(
        obs={"policy": arr(T, B, 3), "critic": arr(T, B, 4)},
        actions=arr(T, B, 2), old_log_probs=arr(T, B) - 3.0, advantages=arr(T, B),
        returns=arr(T, B), old_values=arr(T, B), hidden_start=arr(B, 8),
        reset_mask=np.ones((T, B), dtype=np.float32), sequential=True,
    )
    flat = Minibatch(
        obs={k: v.reshape(1, T * B, -1) for k, v in seq.obs.items()},
        actions=seq.actions.reshape(1, T * B, 2),
        old_log_probs=seq.old_log_probs.reshape(1, -1), advantages=seq.advantages.reshape(1, -1),
        returns=seq.returns.reshape(1, -1), old_values=seq.old_values.reshape(1, -1),
        hidden_start=np.zeros((T * B, 8), dtype=np.float32),
        reset_mask=np.ones((1, T * B), dtype=np.float32), sequential=True,
    )

    grads = []
    for mb in (seq, flat):
        for _, p in net.named_parameters():
            p.grad = None
        with Tape() as tape:
            loss, _ = ppo_loss(mb, net, PpoConfig())
        tape.backward(loss)
        grads.append({n: p.grad.copy() for n, p in net.named_parameters()})
    for name in grads[0]:
        np.testing.assert_allclose(grads[0][name], grads[1][name], rtol=1e-3, atol=1e-5)


# ===============
# 學習率與更新
# ===============


def test_adapt_lr_rules():
    cfg = PpoConfig(kl_target=0.01)
    assert adapt_lr(0.01, 1e-3, cfg) == 1e-3
    assert abs(adapt_lr(0.0, 1e-3, cfg) - 1.5e-3) < 1e-15
    lr = 1e-3
    for _ in range(40):
        lr = adapt_lr(0.1, lr, cfg)
    assert lr == LR_MIN
    assert adapt_lr(0.0, LR_MAX, cfg) == LR_MAX


def test_clipping_bounds_gradient_norm():
    net = make_net()
    rng = np.random.default_rng(0)
    params = net.named_parameters()
    for _, p in params:
        p.grad = rng.normal(size=p.shape).astype(np.float32) * 10
    before = clip_grad_norm(params, 1.0)
    assert before > 1.0
    assert grad_norm(params) <= 1.0 + 1e-6


def test_zero_learning_rate_keeps_parameters():
    net = make_net()
    before = net.state_dict()
    buf = pendulum_buffer(net)
    cfg = PpoConfig(epochs=1, num_minibatches=1, learning_rate=0.0)
    opt = Adam(net.named_parameters())
    for _ in range(3):
        stats, lr = update(buf, net, cfg, opt, np.random.default_rng(0))
    for name, value in net.state_dict().items():
        np.testing.assert_array_equal(value, before[name])
    assert lr == 0.0
    assert {"loss", "approx_kl", "clip_fraction", "entropy", "value_loss", "grad_norm"} <= set(stats)


def test_update_is_seed_deterministic():
    results = []
    for _ in range(2):
        net = make_net(seed=4)
        buf = pendulum_buffer(net, seed=2)
        update(buf, net, PpoConfig(), Adam(net.named_parameters()), np.random.default_rng(9))
        results.append(net.state_dict())
    for name in results[0]:
        np.testing.assert_array_equal(results[0][name], results[1][name])


def test_update_changes_parameters_and_adapts_lr():
    net = make_net()
    before = net.state_dict()
    buf = pendulum_buffer(net)
    stats, lr = update(buf, net, PpoConfig(), Adam(net.named_parameters()), np.random.default_rng(0))
    assert LR_MIN <= lr <= LR_MAX
    assert stats["batch_size"] == 64
    assert any(not np.array_equal(before[n], v) for n, v in net.state_dict().items())


def test_recurrent_update_runs_over_env_minibatches():
    net = make_net(recurrent=True)
    buf = pendulum_buffer(net, B=6, T=5)
    batch = build_batch(buf, True, sequential=True)
    assert batch.num_units == 6
    assert batch.take(np.array([0, 2])).actions.shape == (5, 2, 1)
    stats, _ = update(buf, net, PpoConfig(num_minibatches=3), Adam(net.named_parameters()), np.random.default_rng(0))
    assert math.isfinite(stats["loss"])


def test_advantages_normalized_over_whole_rollout():
    net = make_net()
    buf = pendulum_buffer(net)
    batch = build_batch(buf, True, sequential=False)
    assert abs(float(batch.advantages.mean())) < 1e-5
    assert abs(float(batch.advantages.std()) - 1.0) < 1e-3


def test_ppo_iteration_smoke():
    env = PendulumEnv(8, seed=0)
    net = make_net()
    algo = PPO(net, PpoConfig(rollout_horizon=8))
    state = RolloutState.initial(env, net)
    tracker = EpisodeTracker(8)
    stats = algo.iteration(env, state, tracker)
    assert "explained_variance" in stats and "learning_rate" in stats
    assert algo.learning_rate == stats["learning_rate"]


def test_config_validation():
    with pytest.raises(ConfigError):
        PpoConfig(gamma=0.0)
    with pytest.raises(ConfigError):
        PpoConfig(lam=1.5)
    with pytest.raises(ConfigError):
        PpoConfig.from_dict({"gama": 0.9})
    assert PpoConfig.from_dict(PpoConfig(clip_eps=0.1).to_dict()).clip_eps == 0.1


def main():
    print("🧪 執行 ppo 測試")
    sys.exit(pytest.main([__file__, "-q"]))


if __name__ == "__main__":
    main()
