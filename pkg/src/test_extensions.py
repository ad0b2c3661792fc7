#!/usr/bin/env python3
"""
extensions 測試：對稱映射、資料擴增、對稱損失、Welford 統計、RND 好奇心
"""

import os
import sys
import warnings

import numpy as np
import pytest

# 添加當前目錄到Python路徑
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from autodiff import Tape, Tensor
from envs import PendulumEnv
from errors import ConfigError, RoutingError
from extensions import (
    CuriosityModule,
    RndConfig,
    RunningMoments,
    SymmetrySpec,
    augment_batch,
    builtin_symmetry,
    mirror_actions,
    mirror_obs,
    rnd_reward,
    rnd_update,
    running_update,
    symmetry_defect,
    symmetry_loss,
)
from networks import GaussianActorCritic, NetworkConfig, RndPair, policy_act, policy_evaluate
from optim import Adam
from ppo import Minibatch, PpoConfig, ppo_loss

IDENTITY3 = [(0, 1), (1, 1), (2, 1)]


def identity_spec():
    return SymmetrySpec(obs_maps={"policy": IDENTITY3, "critic": IDENTITY3}, action_map=[(0, 1)])


def pendulum_net(symmetric=False, seed=0):
    cfg = NetworkConfig(hidden_sizes=[16, 16], activation="tanh")
    net = GaussianActorCritic({"policy": 3, "critic": 3}, 1, cfg, seed=seed)
    if symmetric:
        # 零偏置的 tanh 網路為奇函數；忽略 cosθ 後 μ(S s) = −μ(s)
        net.actor.layers[0][0].data[0, :] = 0.0
        for _, b in net.actor.layers:
            b.data[...] = 0.0
        net.actor.layers[-1][0].data *= 100.0
    return net


def random_batch(net, n=16, seed=0):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-np.pi, np.pi, n)
    obs = np.stack([np.cos(theta), np.sin(theta), rng.normal(size=n)], axis=1).astype(np.float32)
    actions = rng.normal(size=(n, 1)).astype(np.float32)
    ev = policy_evaluate(net, {"policy": obs, "critic": obs}, actions)
    return Minibatch(
        obs={"policy": obs, "critic": obs.copy()},
        actions=actions,
        old_log_probs=ev.log_prob.data.copy(),
        advantages=rng.normal(size=n).astype(np.float32),
        returns=rng.normal(size=n).astype(np.float32),
        old_values=ev.value.data.copy(),
    )


# ===============
# 對稱映射
# ===============


def test_mirror_obs_examples():
    spec = builtin_symmetry("pendulum")
    x = np.array([[0.5, 0.1, -0.3]], dtype=np.float32)
    out = mirror_obs(spec, {"policy": x})
    np.testing.assert_array_equal(out["policy"], np.array([[0.5, -0.1, 0.3]], dtype=np.float32))
    np.testing.assert_array_equal(mirror_obs(identity_spec(), {"policy": x})["policy"], x)
    rand = np.random.default_rng(0).normal(size=(10, 3))
    np.testing.assert_array_equal(mirror_obs(spec, mirror_obs(spec, {"critic": rand}))["critic"], rand)
    np.testing.assert_array_equal(mirror_actions(spec, np.array([[1.5]])), [[-1.5]])


def test_mirror_requires_every_group():
    with pytest.raises(ConfigError):
        mirror_obs(identity_spec(), {"rnd": np.zeros((1, 3))})


@pytest.mark.parametrize("mapping", [
    [(1, 1), (2, 1), (0, 1)],     # 三循環不是對合
    [(0, 1), (0, 1)],             # 不是雙射
    [(0, 2.0), (1, 1)],           # 符號不是 ±1
])
def test_invalid_maps_rejected(mapping):
    with pytest.raises(ConfigError):
        SymmetrySpec(obs_maps={"policy": mapping}, action_map=[(0, -1)])


def test_spec_round_trip_and_network_check():
    spec = builtin_symmetry("point_mass", weight=0.2)
    again = SymmetrySpec.from_dict(spec.to_dict())
    assert again.obs_maps == spec.obs_maps and again.weight == 0.2
    with pytest.raises(ConfigError):
        SymmetrySpec.from_dict({**spec.to_dict(), "mirror": True})
    with pytest.raises(ConfigError):
        builtin_symmetry("sparse_chain")
    recurrent = GaussianActorCritic({"policy": 3, "critic": 3}, 1, NetworkConfig(recurrent=True))
    with pytest.raises(ConfigError):
        builtin_symmetry("pendulum").check_network(recurrent)
    builtin_symmetry("pendulum").check_network(pendulum_net())


# ===============
# 資料擴增
# ===============


def test_identity_augmentation_duplicates_batch():
    net = pendulum_net()
    batch = random_batch(net)
    aug = augment_batch(batch, identity_spec(), net)
    n = len(batch)
    assert len(aug) == 2 * n
    np.testing.assert_array_equal(aug.obs["policy"][n:], aug.obs["policy"][:n])
    np.testing.assert_array_equal(aug.advantages[n:], batch.advantages)
    np.testing.assert_allclose(aug.old_log_probs[n:], batch.old_log_probs, atol=1e-6)
    assert abs(float(aug.advantages.astype(np.float64).sum()) - 2 * float(batch.advantages.astype(np.float64).sum())) < 1e-9


def test_identity_augmentation_keeps_ppo_loss():
    net = pendulum_net()
    batch = random_batch(net, seed=1)
    aug = augment_batch(batch, identity_spec(), net)
    # 模擬若干梯度步之後的策略
    net.actor.layers[-1][1].data += 0.3
    net.critic.layers[-1][1].data += 0.2
    _, plain = ppo_loss(batch, net, PpoConfig())
    _, doubled = ppo_loss(aug, net, PpoConfig())
    for key in ("loss", "surrogate_loss", "value_loss", "approx_kl"):
        assert abs(plain[key] - doubled[key]) < 1e-5


def test_equivariant_policy_recomputes_same_log_probs():
    net = pendulum_net(symmetric=True)
    batch = random_batch(net, seed=2)
    aug = augment_batch(batch, builtin_symmetry("pendulum"), net)
    n = len(batch)
    np.testing.assert_array_equal(aug.actions[n:], -batch.actions)
    np.testing.assert_allclose(aug.old_log_probs[n:], batch.old_log_probs, atol=1e-5)


def test_non_equivariant_policy_recomputes_different_log_probs():
    net = pendulum_net(seed=3)
    net.actor.layers[-1][1].data[:] = 0.8
    batch = random_batch(net, seed=3)
    aug = augment_batch(batch, builtin_symmetry("pendulum"), net)
    assert np.abs(aug.old_log_probs[len(batch):] - batch.old_log_probs).max() > 1e-3


# ===============
# 對稱損失
# ===============


def test_symmetry_loss_zero_for_equivariant_policy():
    net = pendulum_net(symmetric=True)
    states = random_batch(net, n=64).obs["policy"]
    assert symmetry_defect(net, states, builtin_symmetry("pendulum")) < 1e-10
    assert symmetry_defect(pendulum_net(seed=5), states, builtin_symmetry("pendulum")) > 0


def test_symmetry_loss_constant_mean_closed_form():
    cfg = NetworkConfig(hidden_sizes=[8])
    net = GaussianActorCritic({"policy": 2, "critic": 2}, 1, cfg)
    for w, b in net.actor.layers:
        w.data[...] = 0.0
        b.data[...] = 0.0
    net.actor.layers[-1][1].data[:] = 0.75
    states = np.random.default_rng(0).normal(size=(10, 2))
    assert abs(symmetry_defect(net, states, builtin_symmetry("point_mass")) - 4 * 0.75 ** 2) < 1e-6


def test_symmetry_loss_gradient():
    net = pendulum_net(seed=6)
    net.actor.layers = [(Tensor(w.data, requires_grad=True, dtype=np.float64),
                         Tensor(b.data + 0.05, requires_grad=True, dtype=np.float64)) for w, b in net.actor.layers]
    spec = builtin_symmetry("pendulum")
    obs = {"policy": random_batch(pendulum_net(), n=8, seed=7).obs["policy"]}
    w0 = net.actor.layers[0][0]

    with Tape() as tape:
        loss = symmetry_loss(net, obs, spec)
    tape.backward(loss)

    eps = 1e-6
    num = np.zeros_like(w0.data)
    for i in np.ndindex(w0.shape):
        old = w0.data[i]
        w0.data[i] = old + eps
        hi = symmetry_loss(net, obs, spec).item()
        w0.data[i] = old - eps
        lo = symmetry_loss(net, obs, spec).item()
        w0.data[i] = old
        num[i] = (hi - lo) / (2 * eps)
    np.testing.assert_allclose(w0.grad, num, rtol=1e-4, atol=1e-9)


def test_symmetric_policy_gives_mirrored_trajectories():
    net = pendulum_net(symmetric=True)
    env_a = PendulumEnv(4, seed=0, random_episode_start=False)
    env_b = PendulumEnv(4, seed=1, random_episode_start=False)
    env_b.state = -env_a.state.copy()
    spec = builtin_symmetry("pendulum")
    obs_a, obs_b = env_a._observe(), env_b._observe()
    for _ in range(30):
        act_a = policy_act(net, obs_a, mode="mean").action
        act_b = policy_act(net, obs_b, mode="mean").action
        np.testing.assert_allclose(act_b, -act_a, atol=1e-5)
        res_a, res_b = env_a.step(act_a), env_b.step(act_b)
        np.testing.assert_allclose(res_a.reward, res_b.reward, rtol=1e-4, atol=1e-5)
        obs_a, obs_b = res_a.obs, res_b.obs
        np.testing.assert_allclose(mirror_obs(spec, {"policy": obs_a["policy"]})["policy"], obs_b["policy"], atol=1e-4)


# ===============
# Welford
# ===============


def test_running_moments_examples():
    m = RunningMoments().update([3.0])
    assert m.mean == 3.0 and m.var == 0.0
    merged = running_update(running_update(RunningMoments(), [1.0, 2.0]), [3.0, 4.0])
    ref = np.array([1.0, 2.0, 3.0, 4.0])
    assert abs(merged.mean - ref.mean()) < 1e-12
    assert abs(merged.var - ref.var(ddof=1)) < 1e-12
    assert RunningMoments().update([]).count == 0


def test_running_moments_large_sample():
    rng = np.random.default_rng(0)
    m = RunningMoments((2,))
    for _ in range(10):
        m.update(rng.standard_normal((100_000, 2)))
    assert m.count == 1_000_000
    assert np.all(np.abs(m.mean) < 0.01)
    assert np.all(np.abs(m.var - 1.0) < 0.01)


def test_running_moments_order_insensitive_and_state():
    rng = np.random.default_rng(1)
    chunks = [rng.normal(size=(n, 3)) for n in (5, 17, 2)]
    a, b = RunningMoments((3,)), RunningMoments((3,))
    for c in chunks:
        a.update(c)
    for c in reversed(chunks):
        b.update(c)
    np.testing.assert_allclose(a.mean, b.mean, rtol=1e-12)
    np.testing.assert_allclose(a.var, b.var, rtol=1e-10)
    np.testing.assert_allclose(a.var, np.concatenate(chunks).var(axis=0, ddof=1), rtol=1e-10)
    c = RunningMoments((3,))
    c.load_state(a.state())
    np.testing.assert_array_equal(c.mean, a.mean)
    assert c.count == a.count


# ===============
# RND
# ===============


def rnd_obs(values):
    return {"rnd": np.asarray(values, dtype=np.float32).reshape(-1, 1)}


def test_zero_scale_gives_zero_reward():
    cfg = RndConfig(reward_scale=0.0, hidden_sizes=[16])
    pair = RndPair(1, cfg.embed_dim, cfg.hidden_sizes, seed=0)
    r = rnd_reward(pair, None, cfg, rnd_obs(np.linspace(0, 1, 8)), RunningMoments())
    np.testing.assert_array_equal(r, np.zeros(8, dtype=np.float32))


def test_identical_pair_gives_zero_reward():
    cfg = RndConfig(hidden_sizes=[16], normalize_reward=False)
    pair = RndPair(1, cfg.embed_dim, cfg.hidden_sizes, seed=0)
    for (tw, tb), (pw, pb) in zip(pair.target.layers, pair.predictor.layers):
        pw.data[...] = tw.data
        pb.data[...] = tb.data
    np.testing.assert_array_equal(rnd_reward(pair, None, cfg, rnd_obs([0.1, 0.7])), [0.0, 0.0])


def test_missing_rnd_group_is_routing_error():
    cfg = RndConfig(hidden_sizes=[16])
    pair = RndPair(1, cfg.embed_dim, cfg.hidden_sizes, seed=0)
    with pytest.raises(RoutingError):
        rnd_reward(pair, None, cfg, {"policy": np.zeros((2, 1), dtype=np.float32)})


def test_reward_normalization_warns_until_std_available():
    cfg = RndConfig(hidden_sizes=[16])
    pair = RndPair(1, cfg.embed_dim, cfg.hidden_sizes, seed=0)
    moments = RunningMoments()
    with pytest.warns(UserWarning):
        rnd_reward(pair, None, cfg, rnd_obs([0.3]), moments)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        r = rnd_reward(pair, None, cfg, rnd_obs(np.linspace(0, 1, 16)), moments)
    assert np.all(r >= 0)


def test_rnd_update_decreases_loss_and_freezes_target():
    cfg = RndConfig(hidden_sizes=[32, 32])
    pair = RndPair(2, cfg.embed_dim, cfg.hidden_sizes, seed=1)
    frozen = [w.data.copy() for w, _ in pair.target.layers]
    batch = np.random.default_rng(0).normal(size=(64, 2)).astype(np.float32)
    opt = Adam(pair.predictor_parameters())
    losses = [rnd_update(pair, batch, cfg, opt) for _ in range(101)]
    non_increasing = sum(b <= a for a, b in zip(losses[:-1], losses[1:]))
    assert losses[-1] < losses[0]
    assert non_increasing >= 80
    for before, (w, _) in zip(frozen, pair.target.layers):
        np.testing.assert_array_equal(before, w.data)
    assert rnd_update(pair, np.zeros((0, 2), dtype=np.float32), cfg, opt) == 0.0


def test_curiosity_prefers_unseen_states():
    cfg = RndConfig(hidden_sizes=[32, 32], normalize_reward=False, learning_rate=3e-3)
    curiosity = CuriosityModule(1, cfg, seed=0)
    rng = np.random.default_rng(0)
    seen = (rng.uniform(0, 5, size=(24, 16, 1)) / 10).astype(np.float32)
    curiosity.intrinsic_rewards({"rnd": seen})
    for _ in range(30):
        curiosity.train({"rnd": seen}, rng, epochs=5, num_minibatches=4)
    unseen = (rng.uniform(5, 10, size=(24, 16, 1)) / 10).astype(np.float32)
    r_seen = rnd_reward(curiosity.pair, curiosity.obs_moments, cfg, {"rnd": seen.reshape(-1, 1)})
    r_unseen = rnd_reward(curiosity.pair, curiosity.obs_moments, cfg, {"rnd": unseen.reshape(-1, 1)})
    assert r_unseen.mean() > r_seen.mean()
    assert np.all(r_seen >= 0) and np.all(r_unseen >= 0)


def test_curiosity_reward_shape_and_state():
    cfg = RndConfig(hidden_sizes=[16])
    curiosity = CuriosityModule(1, cfg, seed=2)
    r = curiosity.intrinsic_rewards({"rnd": np.random.default_rng(0).uniform(size=(6, 4, 1))})
    assert r.shape == (6, 4) and r.dtype == np.float32
    other = CuriosityModule(1, cfg, seed=2)
    other.load_state(curiosity.state())
    assert other.obs_moments.count == 24 and other.reward_moments.count == 24


def main():
    print("🧪 執行 extensions 測試")
    sys.exit(pytest.main([__file__, "-q"]))


if __name__ == "__main__":
    main()
