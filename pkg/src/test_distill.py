#!/usr/bin/env python3
"""
distill 測試：重新標註、蒸餾損失、LQR 專家蒸餾
"""

import math
import os
import sys

import numpy as np
import pytest

# 添加當前目錄到Python路徑
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from distill import (
    DistillBatch,
    DistillConfig,
    Distillation,
    LqrExpert,
    PolicyExpert,
    collect_and_relabel,
    collect_expert_states,
    distill_loss,
    distill_update,
    held_out_action_mse,
    run_distillation,
)
from envs import MemoryRecallEnv, PointMassEnv, lqr_oracle
from errors import ConfigError, RoutingError
from networks import GaussianActorCritic, NetworkConfig
from optim import Adam
from ppo import EpisodeTracker, RolloutState


def point_mass_student(seed=0, recurrent=False):
    cfg = NetworkConfig(hidden_sizes=[32, 32], recurrent=recurrent, hidden_dim=8)
    return GaussianActorCritic({"policy": 2, "critic": 2, "expert": 2}, 1, cfg, seed=seed)


def zero_actor(net):
    for w, b in net.actor.layers:
        w.data[...] = 0.0
        b.data[...] = 0.0


# ===============
# 重新標註
# ===============


def test_beta_one_follows_expert_distribution():
    expert = LqrExpert(lqr_oracle(episodes=100).gain)
    env = PointMassEnv(8, seed=3)
    student = point_mass_student()
    state = RolloutState.initial(env, student)
    data = collect_and_relabel(env, student, expert, 10, 1.0, np.random.default_rng(0), state)
    np.testing.assert_array_equal(data.executed_actions, data.expert_actions)

    reference = collect_expert_states(PointMassEnv(8, seed=3), expert, 10)
    np.testing.assert_array_equal(data.obs["policy"].reshape(-1, 2), reference["policy"])


def test_student_equal_to_expert_labels_its_own_actions():
    student = point_mass_student(seed=1)
    expert = PolicyExpert(student)
    env = PointMassEnv(6, seed=0)
    state = RolloutState.initial(env, student)
    data = collect_and_relabel(env, student, expert, 12, 0.0, np.random.default_rng(0), state, student_mode="mean")
    np.testing.assert_array_equal(data.expert_actions, data.executed_actions)
    assert len(data) == 12 * 6
    assert data.obs["policy"].shape == (12, 6, 2)


def test_mixed_beta_executes_both_sources():
    expert = LqrExpert(lqr_oracle(episodes=100).gain)
    env = PointMassEnv(64, seed=1)
    student = point_mass_student()
    state = RolloutState.initial(env, student)
    data = collect_and_relabel(env, student, expert, 4, 0.5, np.random.default_rng(0), state)
    same = np.all(data.executed_actions == data.expert_actions, axis=-1)
    assert 0.2 < same.mean() < 0.8


def test_labels_come_from_visited_observations_not_executed_actions():
    expert = LqrExpert(lqr_oracle(episodes=100).gain)
    student = point_mass_student()
    runs = []
    for beta in (0.0, 1.0):
        env = PointMassEnv(16, seed=2)
        state = RolloutState.initial(env, student)
        runs.append(collect_and_relabel(env, student, expert, 10, beta, np.random.default_rng(0), state))
    on_policy, expert_driven = runs

    # 相同起點、不同的執行動作：第一步的標籤相同，之後各自等於專家在該觀測上的動作
    assert not np.array_equal(on_policy.executed_actions, expert_driven.executed_actions)
    np.testing.assert_array_equal(on_policy.expert_actions[0], expert_driven.expert_actions[0])
    for data in runs:
        relabeled = expert.act({"expert": data.obs["expert"].reshape(-1, 2)})
        np.testing.assert_allclose(relabeled.reshape(data.expert_actions.shape), data.expert_actions, rtol=1e-6)

    targets = on_policy.batch(False).targets.copy()
    flat = on_policy.executed_actions.reshape(-1, 1)
    on_policy.executed_actions = flat[np.random.default_rng(1).permutation(len(flat))].reshape(10, 16, 1)
    np.testing.assert_array_equal(on_policy.batch(False).targets, targets)


def test_on_policy_student_visits_states_the_expert_never_reaches():
    expert = LqrExpert(lqr_oracle(episodes=100).gain)
    student = point_mass_student()
    zero_actor(student)
    positions = []
    for beta in (0.0, 1.0):
        env = PointMassEnv(64, seed=4, random_episode_start=False)
        state = RolloutState.initial(env, student)
        data = collect_and_relabel(env, student, expert, 60, beta, np.random.default_rng(0), state,
                                   student_mode="mean")
        positions.append(np.abs(data.obs["expert"][..., 0]))
    student_p, expert_p = positions

    reach = expert_p.max()
    assert reach < 1.5
    assert np.mean(student_p[-1] > reach) >= 0.25
    assert student_p[-1].mean() > 5.0 * expert_p[-1].mean()


def test_expert_group_must_exist():
    expert = LqrExpert(np.ones((1, 2)), group="privileged")
    env = PointMassEnv(2, seed=0)
    student = point_mass_student()
    state = RolloutState.initial(env, student)
    with pytest.raises(RoutingError):
        collect_and_relabel(env, student, expert, 2, 0.0, np.random.default_rng(0), state)


def test_lqr_expert_clips_actions():
    expert = LqrExpert(np.array([[100.0, 0.0]]))
    actions = expert.act({"expert": np.array([[1.0, 0.0], [-0.01, 0.0]], dtype=np.float32)})
    np.testing.assert_allclose(actions, [[-10.0], [1.0]], rtol=1e-6)


def test_policy_expert_is_frozen_copy():
    student = point_mass_student(seed=2)
    expert = PolicyExpert(student)
    obs = {"policy": np.ones((3, 2), dtype=np.float32), "critic": np.ones((3, 2), dtype=np.float32)}
    before = expert.act(obs)
    student.actor.layers[-1][1].data += 5.0
    np.testing.assert_array_equal(expert.act(obs), before)


# ===============
# 損失與更新
# ===============


def test_single_pair_losses():
    student = point_mass_student()
    zero_actor(student)
    zeros = np.zeros((1, 2), dtype=np.float32)
    batch = DistillBatch({"policy": zeros, "critic": zeros}, np.array([[2.0]], dtype=np.float32))
    assert abs(distill_loss(batch, student, "mse_on_mean").item() - 4.0) < 1e-6
    expected_nll = 0.5 * math.log(2 * math.pi) + 2.0
    assert abs(distill_loss(batch, student, "nll").item() - expected_nll) < 1e-5


def test_matching_student_has_zero_loss_and_stays_put_at_zero_lr():
    student = point_mass_student(seed=4)
    env = PointMassEnv(8, seed=0)
    state = RolloutState.initial(env, student)
    data = collect_and_relabel(env, student, PolicyExpert(student), 6, 0.0, np.random.default_rng(0), state)
    before = student.state_dict()
    cfg = DistillConfig(learning_rate=0.0, num_minibatches=1, epochs_per_iteration=1)
    stats = distill_update(data, student, cfg, Adam(student.named_parameters()), np.random.default_rng(0))
    assert stats["distill_loss"] < 1e-10
    for name, value in student.state_dict().items():
        np.testing.assert_array_equal(value, before[name])


def test_recurrent_student_trains_on_sequences():
    env = MemoryRecallEnv(8, seed=0, random_episode_start=False)
    cfg = NetworkConfig(hidden_sizes=[16], recurrent=True, hidden_dim=8)
    student = GaussianActorCritic(env.obs_schema, 1, cfg)
    expert = LqrExpert(np.array([[-1.0, 0.0, 0.0]]), low=-1.0, high=1.0)
    state = RolloutState.initial(env, student)
    data = collect_and_relabel(env, student, expert, 13, 0.0, np.random.default_rng(0), state)
    np.testing.assert_array_equal(data.hidden_start, np.zeros((8, 8), dtype=np.float32))
    np.testing.assert_array_equal(data.reset_mask[0], 1.0)
    np.testing.assert_array_equal(data.expert_actions[:, :, 0], data.obs["expert"][:, :, 0])
    stats = distill_update(data, student, DistillConfig(num_minibatches=2), Adam(student.named_parameters()),
                           np.random.default_rng(0))
    assert np.isfinite(stats["distill_loss"])


def test_config_validation():
    with pytest.raises(ConfigError):
        DistillConfig(beta=1.5)
    with pytest.raises(ConfigError):
        DistillConfig(loss_kind="huber")
    with pytest.raises(ConfigError):
        DistillConfig.from_dict({"iters": 3})
    cfg = DistillConfig(beta=0.8, beta_decay=0.5)
    assert cfg.beta_at(0) == 0.8 and abs(cfg.beta_at(2) - 0.2) < 1e-12


def test_lqr_distillation_reduces_held_out_error():
    expert = LqrExpert(lqr_oracle(episodes=100).gain)
    held_out = collect_expert_states(PointMassEnv(16, seed=100), expert, 8)
    student = point_mass_student(seed=0)
    cfg = DistillConfig(iterations=30, learning_rate=3e-3)
    initial = held_out_action_mse(student, held_out, expert)
    _, history = run_distillation(PointMassEnv(16, seed=0), student, expert, cfg, held_out)
    assert len(history) == 30
    assert history[-1]["held_out_action_mse"] < 0.5 * initial
    assert all(np.isfinite(h["distill_loss"]) for h in history)


def test_distillation_iteration_reports_beta():
    expert = LqrExpert(lqr_oracle(episodes=100).gain)
    student = point_mass_student()
    algo = Distillation(student, expert, DistillConfig(beta=1.0, beta_decay=0.5, rollout_horizon=4))
    env = PointMassEnv(4, seed=0)
    algo.begin(env)
    state = RolloutState.initial(env, student)
    tracker = EpisodeTracker(4)
    assert algo.iteration(env, state, tracker)["beta"] == 1.0
    assert algo.iteration(env, state, tracker)["beta"] == 0.5


def test_distillation_is_bitwise_reproducible():
    def run():
        expert = LqrExpert(lqr_oracle(episodes=100).gain)
        student = point_mass_student(seed=3)
        cfg = DistillConfig(iterations=3, rollout_horizon=8, beta=0.5, beta_decay=0.8, seed=5)
        _, history = run_distillation(PointMassEnv(8, seed=0), student, expert, cfg)
        return student.state_dict(), history

    (params_a, history_a), (params_b, history_b) = run(), run()
    assert history_a == history_b
    for name, value in params_a.items():
        np.testing.assert_array_equal(params_b[name], value)


def main():
    print("🧪 執行 distill 測試")
    sys.exit(pytest.main([__file__, "-q"]))


if __name__ == "__main__":
    main()
