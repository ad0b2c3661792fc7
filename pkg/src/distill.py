"""
distill - DAgger 式行為複製
------------------------------------------------------------
學生策略推進環境，每個造訪到的觀測都以專家動作重新標註，
只用本輪資料做監督式更新（不跨輪累積）。
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from autodiff import Tape, Tensor, no_grad
from distributed import allreduce_gradients
from envs import VecEnv, lqr_oracle
from errors import ConfigError, NumericFault, RoutingError
from networks import GaussianActorCritic, obs_group, policy_act, policy_evaluate
from optim import Adam, clip_grad_norm
from ppo import EpisodeTracker, RolloutState

LOSS_KINDS = ("mse_on_mean", "nll")


# ===============
# 專家
# ===============


class Expert:
    """確定性的動作來源；可讀取特權的 expert 觀測群組。"""

    required_group = "expert"

    def check(self, obs_schema: Mapping[str, int]) -> None:
        if self.required_group not in obs_schema:
            raise RoutingError(self.required_group, obs_schema.keys())

    def reset(self, num_envs: int) -> None:
        pass

    def act(self, obs: Mapping[str, np.ndarray], episode_start: Optional[np.ndarray] = None) -> np.ndarray:
        raise NotImplementedError


class LqrExpert(Expert):
    """u = −K·x，截斷於動作界限。"""

    def __init__(self, gain: np.ndarray, group: str = "expert", low: float = -10.0, high: float = 10.0):
        self.gain = np.atleast_2d(np.asarray(gain, dtype=np.float64))
        self.required_group = group
        self.low = low
        self.high = high

    @classmethod
    def from_oracle(cls, **oracle_kwargs) -> "LqrExpert":
        return cls(lqr_oracle(**oracle_kwargs).gain)

    def act(self, obs, episode_start=None):
        x = obs_group(obs, self.required_group).astype(np.float64)
        u = -(x @ self.gain.T)
        return np.clip(u, self.low, self.high).astype(np.float32)


class PolicyExpert(Expert):
    """凍結的策略網路，以均值模式給動作；遞迴網路自行維護隱狀態。"""

    def __init__(self, net: GaussianActorCritic):
        self.net = net.clone()
        for p in self.net.parameters():
            p.requires_grad = False
        self.required_group = self.net.actor_group
        self.hidden: Optional[np.ndarray] = None

    def reset(self, num_envs: int) -> None:
        self.hidden = self.net.zero_hidden(num_envs)

    def act(self, obs, episode_start=None):
        step = policy_act(self.net, obs, "mean", hidden=self.hidden, reset=episode_start)
        self.hidden = step.hidden
        return step.action


# ===============
# 設定與資料
# ===============


@dataclass
class DistillConfig:
    iterations: int = 50
    rollout_horizon: int = 24
    learning_rate: float = 1e-3
    epochs_per_iteration: int = 4
    num_minibatches: int = 4
    loss_kind: str = "mse_on_mean"
    beta: float = 0.0
    beta_decay: float = 1.0
    student_mode: str = "sample"
    max_grad_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations 不可為負")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"未知的蒸餾損失：{self.loss_kind}（可用 {LOSS_KINDS}）")
        if not 0.0 <= self.beta <= 1.0 or not 0.0 <= self.beta_decay <= 1.0:
            raise ConfigError("beta 與 beta_decay 需在 [0, 1]")
        if self.student_mode not in ("sample", "mean"):
            raise ConfigError(f"未知的學生動作模式：{self.student_mode}")
        if self.rollout_horizon < 1 or self.epochs_per_iteration < 1 or self.num_minibatches < 1:
            raise ConfigError("rollout_horizon / epochs_per_iteration / num_minibatches 必須 ≥ 1")

    def beta_at(self, iteration: int) -> float:
        return self.beta * self.beta_decay ** iteration

    @classmethod
    def from_dict(cls, data: Mapping) -> "DistillConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"DistillConfig 不認得的欄位：{sorted(unknown)}")
        return cls(**dict(data))

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class DistillDataset:
    obs: Dict[str, np.ndarray]        # [T×B×d]
    expert_actions: np.ndarray        # [T×B×A]
    executed_actions: np.ndarray      # [T×B×A]
    reset_mask: np.ndarray            # [T×B]
    hidden_start: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return int(self.expert_actions.shape[0] * self.expert_actions.shape[1])

    def batch(self, sequential: bool) -> "DistillBatch":
        if sequential:
            return DistillBatch(dict(self.obs), self.expert_actions, self.hidden_start, self.reset_mask, True)
        n = len(self)
        return DistillBatch({k: v.reshape(n, -1) for k, v in self.obs.items()},
                            self.expert_actions.reshape(n, -1))


@dataclass
class DistillBatch:
    obs: Dict[str, np.ndarray]
    targets: np.ndarray
    hidden_start: Optional[np.ndarray] = None
    reset_mask: Optional[np.ndarray] = None
    sequential: bool = False

    @property
    def num_units(self) -> int:
        return int(self.targets.shape[1] if self.sequential else self.targets.shape[0])

    def take(self, idx) -> "DistillBatch":
        if not self.sequential:
            return DistillBatch({k: v[idx] for k, v in self.obs.items()}, self.targets[idx])
        return DistillBatch(
            {k: v[:, idx] for k, v in self.obs.items()}, self.targets[:, idx],
            None if self.hidden_start is None else self.hidden_start[idx], self.reset_mask[:, idx], True,
        )


# ===============
# 收集與更新
# ===============


def collect_and_relabel(env: VecEnv, student: GaussianActorCritic, expert: Expert, horizon: int, beta: float,
                        rng: np.random.Generator, state: RolloutState, student_mode: str = "sample",
                        tracker: Optional[EpisodeTracker] = None) -> DistillDataset:
    """β 機率執行專家動作、否則執行學生動作；儲存的標籤一律是專家在該觀測上的動作。"""
    expert.check(state.obs.widths())
    B = env.num_envs
    obs_steps: Dict[str, List[np.ndarray]] = {k: [] for k in state.obs}
    targets, executed, resets = [], [], []
    hidden_start = None if state.hidden is None else state.hidden.copy()

    for _ in range(horizon):
        reset = state.episode_start
        step = policy_act(student, state.obs, student_mode, rng, state.hidden, reset)
        expert_action = expert.act(state.obs, reset)
        if beta >= 1.0:
            action = expert_action
        elif beta <= 0.0:
            action = step.action
        else:
            use_expert = rng.random(B) < beta
            action = np.where(use_expert[:, None], expert_action, step.action)
        res = env.step(action)

        for k, v in state.obs.items():
            obs_steps[k].append(v)
        targets.append(expert_action)
        executed.append(action)
        resets.append(reset)
        if tracker is not None:
            tracker.record(res.reward, res.dones, res.success)

        state.obs = res.obs
        state.hidden = step.hidden
        state.episode_start = res.dones.astype(np.float32)

    return DistillDataset(
        obs={k: np.stack(v) for k, v in obs_steps.items()},
        expert_actions=np.stack(targets).astype(np.float32),
        executed_actions=np.stack(executed).astype(np.float32),
        reset_mask=np.stack(resets).astype(np.float32),
        hidden_start=hidden_start,
    )


def distill_loss(batch: DistillBatch, student: GaussianActorCritic, loss_kind: str = "mse_on_mean") -> Tensor:
    ev = policy_evaluate(student, batch.obs, batch.targets, batch.hidden_start, batch.reset_mask)
    if loss_kind == "nll":
        return -ev.log_prob.mean()
    target = Tensor(batch.targets.reshape(ev.mean.shape))
    return (ev.mean - target).square().sum(axes=1).mean()


def distill_update(dataset: DistillDataset, student: GaussianActorCritic, cfg: DistillConfig, optimizer: Adam,
                   rng: np.random.Generator, reducer=None) -> Dict[str, float]:
    params = student.named_parameters()
    data = dataset.batch(student.is_recurrent)
    n_units = data.num_units
    losses = []
    for _ in range(cfg.epochs_per_iteration):
        for idx in np.array_split(rng.permutation(n_units), min(cfg.num_minibatches, n_units)):
            optimizer.zero_grad()
            with Tape() as tape:
                loss = distill_loss(data.take(idx), student, cfg.loss_kind)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericFault("distill_loss", value)
            tape.backward(loss)
            allreduce_gradients(reducer, params)
            clip_grad_norm(params, cfg.max_grad_norm)
            optimizer.step(cfg.learning_rate)
            losses.append(value)
    return {"distill_loss": float(np.mean(losses)) if losses else 0.0}


def held_out_action_mse(student: GaussianActorCritic, obs: Mapping[str, np.ndarray], expert: Expert) -> float:
    """前饋學生在固定專家狀態集上的動作 MSE。"""
    targets = expert.act(obs)
    with no_grad():
        mu = student.actor(Tensor(obs_group(obs, student.actor_group))).data
    return float(np.mean(np.sum((mu.astype(np.float64) - targets) ** 2, axis=1)))


def collect_expert_states(env: VecEnv, expert: Expert, steps: int) -> Dict[str, np.ndarray]:
    """以專家推進環境，收集 steps × B 個觀測作為保留評估集。"""
    expert.reset(env.num_envs)
    obs = env.reset_all()
    start = np.ones(env.num_envs, dtype=np.float32)
    rows: Dict[str, List[np.ndarray]] = {k: [] for k in obs}
    for _ in range(steps):
        for k, v in obs.items():
            rows[k].append(v)
        res = env.step(expert.act(obs, start))
        obs = res.obs
        start = res.dones.astype(np.float32)
    return {k: np.concatenate(v) for k, v in rows.items()}


class Distillation:
    """學生網路、專家、最佳化器與亂數的組合。"""

    def __init__(self, student: GaussianActorCritic, expert: Expert, cfg: DistillConfig, reducer=None,
                 held_out: Optional[Mapping[str, np.ndarray]] = None):
        self.net = student
        self.expert = expert
        self.cfg = cfg
        self.reducer = reducer
        self.held_out = held_out
        self.optimizer = Adam(student.named_parameters())
        self.rng = np.random.default_rng(cfg.seed)
        self.iterations_done = 0

    @property
    def learning_rate(self) -> float:
        return self.cfg.learning_rate

    def begin(self, env: VecEnv) -> None:
        self.expert.reset(env.num_envs)

    def iteration(self, env: VecEnv, state: RolloutState, tracker: Optional[EpisodeTracker] = None) -> Dict[str, float]:
        beta = self.cfg.beta_at(self.iterations_done)
        dataset = collect_and_relabel(env, self.net, self.expert, self.cfg.rollout_horizon, beta, self.rng,
                                      state, self.cfg.student_mode, tracker)
        stats = distill_update(dataset, self.net, self.cfg, self.optimizer, self.rng, self.reducer)
        stats["beta"] = beta
        if self.held_out is not None and not self.net.is_recurrent:
            stats["held_out_action_mse"] = held_out_action_mse(self.net, self.held_out, self.expert)
        self.iterations_done += 1
        return stats


def run_distillation(env: VecEnv, student: GaussianActorCritic, expert: Expert, cfg: DistillConfig,
                     held_out: Optional[Mapping[str, np.ndarray]] = None) -> Tuple[GaussianActorCritic, List[Dict]]:
    """collect_and_relabel → distill_update 共 cfg.iterations 輪；回傳 (學生, 每輪統計)。"""
    algo = Distillation(student, expert, cfg, held_out=held_out)
    algo.begin(env)
    state = RolloutState.initial(env, student)
    tracker = EpisodeTracker(env.num_envs)
    history = []
    for _ in range(cfg.iterations):
        stats = algo.iteration(env, state, tracker)
        summary = tracker.drain()
        stats["mean_episode_return"] = summary.mean_return
        history.append(stats)
    return student, history


__all__ = [
    "LOSS_KINDS",
    "Expert",
    "LqrExpert",
    "PolicyExpert",
    "DistillConfig",
    "DistillDataset",
    "DistillBatch",
    "collect_and_relabel",
    "distill_loss",
    "distill_update",
    "held_out_action_mse",
    "collect_expert_states",
    "Distillation",
    "run_distillation",
]
