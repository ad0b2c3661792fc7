"""
ppo - 同策略 PPO
------------------------------------------------------------
▸ collect_rollout：T 步 × B 環境，timeout 時把 γ·V(terminal_obs) 併入獎勵
▸ compute_gae：反向遞迴 δ / A / R
▸ ppo_loss：clip 代理目標 + (可截斷的) 價值損失 − 熵獎勵
▸ update：前饋依樣本洗牌；遞迴只在環境索引上切 minibatch，整段時間做 BPTT
▸ adapt_lr：依 epoch 平均 KL 調整學習率
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Mapping, Optional, Protocol, Tuple

import numpy as np

from autodiff import Tape, Tensor, clamp, maximum, minimum
from distributed import allreduce_gradients
from envs import ObservationSet, VecEnv
from errors import ConfigError, NumericFault, ShapeError
from networks import GaussianActorCritic, policy_act, policy_evaluate, policy_value
from optim import Adam, clip_grad_norm

LR_MIN = 1e-5
LR_MAX = 1e-2


# ===============
# 設定
# ===============


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 5
    num_minibatches: int = 4
    learning_rate: float = 1e-3
    kl_target: float = 0.01
    value_coef: float = 1.0
    entropy_coef: float = 0.01
    max_grad_norm: float = 1.0
    normalize_advantages: bool = True
    clip_value_loss: bool = True
    rollout_horizon: int = 24
    schedule: str = "adaptive"
    bootstrap_timeouts: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma 需在 (0, 1]：{self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam 需在 [0, 1]：{self.lam}")
        if self.clip_eps <= 0:
            raise ConfigError("clip_eps 必須 > 0")
        if self.epochs * self.num_minibatches < 1 or self.epochs < 0 or self.num_minibatches < 1:
            raise ConfigError("epochs·num_minibatches 必須 ≥ 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate 不可為負")
        if self.rollout_horizon < 1:
            raise ConfigError("rollout_horizon 必須 ≥ 1")
        if self.schedule not in ("adaptive", "fixed"):
            raise ConfigError(f"未知的學習率排程：{self.schedule}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "PpoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"PpoConfig 不認得的欄位：{sorted(unknown)}")
        return cls(**dict(data))

    def to_dict(self) -> Dict:
        return asdict(self)


# ===============
# 資料容器
# ===============


@dataclass
class RolloutState:
    """跨 rollout 延續的狀態：目前觀測、隱狀態與 episode 邊界旗標。"""

    obs: ObservationSet
    hidden: Optional[np.ndarray]
    episode_start: np.ndarray

    @classmethod
    def initial(cls, env: VecEnv, net: GaussianActorCritic, seed: Optional[int] = None) -> "RolloutState":
        obs = env.reset_all(seed)
        return cls(obs=obs, hidden=net.zero_hidden(env.num_envs),
                   episode_start=np.ones(env.num_envs, dtype=np.float32))


@dataclass
class RolloutBuffer:
    obs: Dict[str, np.ndarray]          # 群組 → [T×B×d]
    actions: np.ndarray                 # [T×B×A]
    rewards: np.ndarray                 # [T×B]，已含 timeout bootstrap
    values: np.ndarray                  # [T×B]
    log_probs: np.ndarray               # [T×B]
    terminated: np.ndarray              # [T×B] bool
    timeouts: np.ndarray                # [T×B] bool
    reset_mask: np.ndarray              # [T×B] float32
    bootstrap_value: np.ndarray         # [B]
    hidden_start: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None

    @property
    def horizon(self) -> int:
        return int(self.actions.shape[0])

    @property
    def num_envs(self) -> int:
        return int(self.actions.shape[1])

    @property
    def dones(self) -> np.ndarray:
        return self.terminated | self.timeouts

    def __len__(self) -> int:
        return self.horizon * self.num_envs


@dataclass
class Minibatch:
    """前饋：各陣列為 [N×·]；sequential 時為 [T×b×·] 並附 hidden_start / reset_mask。"""

    obs: Dict[str, np.ndarray]
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    old_values: np.ndarray
    hidden_start: Optional[np.ndarray] = None
    reset_mask: Optional[np.ndarray] = None
    sequential: bool = False

    def __len__(self) -> int:
        return int(self.advantages.size)

    @property
    def num_units(self) -> int:
        """可切分的單位數：前饋為樣本數，遞迴為環境數。"""
        return int(self.actions.shape[1] if self.sequential else self.actions.shape[0])

    def take(self, idx: np.ndarray) -> "Minibatch":
        if not self.sequential:
            return Minibatch(
                obs={k: v[idx] for k, v in self.obs.items()},
                actions=self.actions[idx],
                old_log_probs=self.old_log_probs[idx],
                advantages=self.advantages[idx],
                returns=self.returns[idx],
                old_values=self.old_values[idx],
            )
        return Minibatch(
            obs={k: v[:, idx] for k, v in self.obs.items()},
            actions=self.actions[:, idx],
            old_log_probs=self.old_log_probs[:, idx],
            advantages=self.advantages[:, idx],
            returns=self.returns[:, idx],
            old_values=self.old_values[:, idx],
            hidden_start=None if self.hidden_start is None else self.hidden_start[idx],
            reset_mask=self.reset_mask[:, idx],
            sequential=True,
        )


@dataclass
class EpisodeSummary:
    count: int
    mean_return: Optional[float]
    mean_length: Optional[float]
    success_rate: Optional[float]


class EpisodeTracker:
    """累計每個環境的回報與長度；episode 結束時移到完成列表。"""

    def __init__(self, num_envs: int):
        self.running_return = np.zeros(num_envs, dtype=np.float64)
        self.running_length = np.zeros(num_envs, dtype=np.int64)
        self.returns: List[float] = []
        self.lengths: List[int] = []
        self.successes: List[bool] = []

    def record(self, rewards: np.ndarray, dones: np.ndarray, success: Optional[np.ndarray] = None) -> None:
        self.running_return += rewards
        self.running_length += 1
        for b in np.flatnonzero(dones):
            self.returns.append(float(self.running_return[b]))
            self.lengths.append(int(self.running_length[b]))
            if success is not None:
                self.successes.append(bool(success[b]))
            self.running_return[b] = 0.0
            self.running_length[b] = 0

    def drain(self) -> EpisodeSummary:
        n = len(self.returns)
        summary = EpisodeSummary(
            count=n,
            mean_return=float(np.mean(self.returns)) if n else None,
            mean_length=float(np.mean(self.lengths)) if n else None,
            success_rate=float(np.mean(self.successes)) if self.successes else None,
        )
        self.returns, self.lengths, self.successes = [], [], []
        return summary


# ===============
# Rollout
# ===============


def collect_rollout(env: VecEnv, net: GaussianActorCritic, horizon: int, state: RolloutState,
                    rng: np.random.Generator, gamma: float = 0.99, bootstrap_timeouts: bool = True,
                    tracker: Optional[EpisodeTracker] = None) -> RolloutBuffer:
    """以取樣動作推進環境 horizon 步；state 會就地更新成下一段 rollout 的起點。"""
    B = env.num_envs
    if state.obs.batch_size != B:
        raise ShapeError(f"RolloutState batch {state.obs.batch_size} 與環境數 {B} 不符")

    obs_steps: Dict[str, List[np.ndarray]] = {k: [] for k in state.obs}
    actions, rewards, values, log_probs = [], [], [], []
    terminated, timeouts, resets = [], [], []
    hidden_start = None if state.hidden is None else state.hidden.copy()

    for _ in range(horizon):
        reset = state.episode_start
        step = policy_act(net, state.obs, "sample", rng, state.hidden, reset)
        res = env.step(step.action)

        reward = res.reward.astype(np.float32).copy()
        if bootstrap_timeouts and res.timeout.any():
            ids = np.flatnonzero(res.timeout)
            rows = res.terminal_obs.rows(np.searchsorted(res.terminal_ids, ids))
            h = None if step.hidden is None else step.hidden[ids]
            reward[ids] += np.float32(gamma) * policy_value(net, rows, hidden=h)

        for k, v in state.obs.items():
            obs_steps[k].append(v)
        actions.append(step.action)
        rewards.append(reward)
        values.append(step.value)
        log_probs.append(step.log_prob)
        terminated.append(res.terminated)
        timeouts.append(res.timeout)
        resets.append(reset)
        if tracker is not None:
            tracker.record(res.reward, res.dones, res.success)

        state.obs = res.obs
        state.hidden = step.hidden
        state.episode_start = res.dones.astype(np.float32)

    bootstrap = policy_value(net, state.obs, state.hidden, state.episode_start)
    bootstrap = np.where(terminated[-1], 0.0, bootstrap).astype(np.float32)

    return RolloutBuffer(
        obs={k: np.stack(v) for k, v in obs_steps.items()},
        actions=np.stack(actions),
        rewards=np.stack(rewards),
        values=np.stack(values),
        log_probs=np.stack(log_probs),
        terminated=np.stack(terminated),
        timeouts=np.stack(timeouts),
        reset_mask=np.stack(resets).astype(np.float32),
        bootstrap_value=bootstrap,
        hidden_start=hidden_start,
    )


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> RolloutBuffer:
    """δ_t = r_t + γV_{t+1}(1−done_t) − V_t；A_t = δ_t + γλ(1−done_t)A_{t+1}；R_t = A_t + V_t。"""
    rewards = buffer.rewards.astype(np.float64)
    values = buffer.values.astype(np.float64)
    not_done = 1.0 - buffer.dones.astype(np.float64)
    advantages = np.zeros_like(rewards)
    next_value = buffer.bootstrap_value.astype(np.float64)
    last = np.zeros(buffer.num_envs)
    for t in reversed(range(buffer.horizon)):
        delta = rewards[t] + gamma * next_value * not_done[t] - values[t]
        last = delta + gamma * lam * not_done[t] * last
        advantages[t] = last
        next_value = values[t]
    buffer.advantages = advantages
    buffer.returns = advantages + values
    return buffer


def explained_variance(values: np.ndarray, returns: np.ndarray) -> Optional[float]:
    var = float(np.var(returns))
    if var == 0.0:
        return None
    return float(1.0 - np.var(returns - values) / var)


# ===============
# 損失
# ===============


def ppo_loss(batch: Minibatch, net: GaussianActorCritic, cfg: PpoConfig) -> Tuple[Tensor, Dict[str, float]]:
    ev = policy_evaluate(net, batch.obs, batch.actions, batch.hidden_start, batch.reset_mask)
    old_lp = Tensor(batch.old_log_probs.reshape(-1))
    adv = Tensor(batch.advantages.reshape(-1))
    ret = Tensor(batch.returns.reshape(-1))
    old_v = Tensor(batch.old_values.reshape(-1))
    eps = cfg.clip_eps

    log_ratio = ev.log_prob - old_lp
    ratio = log_ratio.exp()
    surrogate = -minimum(ratio * adv, clamp(ratio, 1.0 - eps, 1.0 + eps) * adv).mean()

    v = ev.value
    if cfg.clip_value_loss:
        v_clipped = old_v + clamp(v - old_v, -eps, eps)
        value_loss = maximum((v - ret).square(), (v_clipped - ret).square()).mean()
    else:
        value_loss = (v - ret).square().mean()
    entropy = ev.entropy.mean()
    loss = surrogate + cfg.value_coef * value_loss - cfg.entropy_coef * entropy

    lr64 = log_ratio.data.astype(np.float64)
    rho = np.exp(lr64)
    stats = {
        "loss": loss.item(),
        "surrogate_loss": surrogate.item(),
        "value_loss": value_loss.item(),
        "entropy": entropy.item(),
        "approx_kl": float(np.mean(rho - 1.0 - lr64)),
        "clip_fraction": float(np.mean(np.abs(rho - 1.0) > eps)),
    }
    for name, value in stats.items():
        if not math.isfinite(value):
            raise NumericFault(name, value)
    return loss, stats


def adapt_lr(mean_kl: float, lr: float, cfg: PpoConfig) -> float:
    if mean_kl > 2.0 * cfg.kl_target:
        lr = lr / 1.5
    elif mean_kl < cfg.kl_target / 2.0:
        lr = lr * 1.5
    return min(max(lr, LR_MIN), LR_MAX)


# ===============
# 更新
# ===============


class SymmetryHook(Protocol):
    use_augmentation: bool
    use_loss: bool
    weight: float

    def augment(self, batch: Minibatch, net: GaussianActorCritic) -> Minibatch: ...

    def loss(self, net: GaussianActorCritic, obs: Mapping[str, np.ndarray]) -> Tensor: ...


class Reducer(Protocol):
    world_size: int

    def allreduce(self, flat: np.ndarray) -> np.ndarray: ...

    def allreduce_stats(self, values: np.ndarray) -> np.ndarray: ...


def normalize_advantages(adv: np.ndarray, reducer: Optional[Reducer] = None) -> np.ndarray:
    """以整個 rollout 的均值 / 標準差正規化優勢。

    資料平行時先合併各 worker 的總和與筆數得到全域均值，再合併離均差平方和，
    因此每個 worker 用的是 W·B 個環境的統計量，與單一程序的大批次一致。
    """
    if reducer is None or reducer.world_size <= 1:
        return (adv - adv.mean()) / (adv.std() + 1e-8)
    total, count = reducer.allreduce_stats(np.array([adv.sum(), adv.size], dtype=np.float64))
    mean = float(total) / float(count)
    (sq,) = reducer.allreduce_stats(np.array([np.square(adv - mean).sum()], dtype=np.float64))
    std = math.sqrt(max(float(sq), 0.0) / float(count))
    return (adv - mean) / (std + 1e-8)


def build_batch(buffer: RolloutBuffer, normalize: bool, sequential: bool,
                reducer: Optional[Reducer] = None) -> Minibatch:
    """把 rollout 轉成可切分的批次；優勢正規化在整個 rollout 上做一次。"""
    if buffer.advantages is None or buffer.returns is None:
        raise ValueError("尚未執行 compute_gae")
    adv = buffer.advantages
    if normalize:
        adv = normalize_advantages(adv, reducer)
    adv = adv.astype(np.float32)
    returns = buffer.returns.astype(np.float32)
    if sequential:
        return Minibatch(
            obs=dict(buffer.obs), actions=buffer.actions, old_log_probs=buffer.log_probs,
            advantages=adv, returns=returns, old_values=buffer.values,
            hidden_start=buffer.hidden_start, reset_mask=buffer.reset_mask, sequential=True,
        )
    n = len(buffer)
    return Minibatch(
        obs={k: v.reshape(n, -1) for k, v in buffer.obs.items()},
        actions=buffer.actions.reshape(n, -1),
        old_log_probs=buffer.log_probs.reshape(n),
        advantages=adv.reshape(n),
        returns=returns.reshape(n),
        old_values=buffer.values.reshape(n),
    )


def update(buffer: RolloutBuffer, net: GaussianActorCritic, cfg: PpoConfig, optimizer: Adam,
           rng: np.random.Generator, lr: Optional[float] = None, symmetry: Optional[SymmetryHook] = None,
           reducer: Optional[Reducer] = None) -> Tuple[Dict[str, float], float]:
    """epochs × minibatches 次梯度步；回傳 (平均統計, 更新後學習率)。"""
    lr = cfg.learning_rate if lr is None else lr
    params = net.named_parameters()
    data = build_batch(buffer, cfg.normalize_advantages, net.is_recurrent, reducer)
    if symmetry is not None and symmetry.use_augmentation:
        data = symmetry.augment(data, net)

    n_units = data.num_units
    n_mb = min(cfg.num_minibatches, n_units)
    totals: Dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        epoch_kl = []
        for idx in np.array_split(rng.permutation(n_units), n_mb):
            mb = data.take(idx)
            optimizer.zero_grad()
            with Tape() as tape:
                loss, stats = ppo_loss(mb, net, cfg)
                if symmetry is not None and symmetry.use_loss:
                    sym = symmetry.loss(net, mb.obs)
                    loss = loss + symmetry.weight * sym
                    stats["symmetry_loss"] = sym.item()
            tape.backward(loss)
            allreduce_gradients(reducer, params)
            stats["grad_norm"] = clip_grad_norm(params, cfg.max_grad_norm)
            optimizer.step(lr)

            epoch_kl.append(stats["approx_kl"])
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1

        if cfg.schedule == "adaptive" and lr > 0:
            mean_kl = float(np.mean(epoch_kl))
            if reducer is not None and reducer.world_size > 1:
                mean_kl = float(reducer.allreduce_stats(np.array([mean_kl], dtype=np.float32))[0])
            lr = adapt_lr(mean_kl, lr, cfg)

    out = {k: v / max(count, 1) for k, v in totals.items()}
    out["learning_rate"] = lr
    out["batch_size"] = len(data)
    return out, lr


# ===============
# 演算法封裝
# ===============


class PPO:
    """網路、最佳化器、洗牌亂數與可選擴充（對稱、好奇心、梯度同步）的組合。"""

    def __init__(self, net: GaussianActorCritic, cfg: PpoConfig, symmetry: Optional[SymmetryHook] = None,
                 curiosity=None, reducer: Optional[Reducer] = None):
        self.net = net
        self.cfg = cfg
        self.optimizer = Adam(net.named_parameters())
        self.learning_rate = cfg.learning_rate
        self.rng = np.random.default_rng(cfg.seed)
        self.symmetry = symmetry
        self.curiosity = curiosity
        self.reducer = reducer

    def collect(self, env: VecEnv, state: RolloutState, tracker: Optional[EpisodeTracker] = None) -> RolloutBuffer:
        return collect_rollout(env, self.net, self.cfg.rollout_horizon, state, self.rng,
                               self.cfg.gamma, self.cfg.bootstrap_timeouts, tracker)

    def process(self, buffer: RolloutBuffer) -> Dict[str, float]:
        """好奇心獎勵（在 GAE 之前併入）與 GAE。"""
        stats: Dict[str, float] = {}
        if self.curiosity is not None:
            intrinsic = self.curiosity.intrinsic_rewards(buffer.obs)
            buffer.rewards = (buffer.rewards + intrinsic).astype(np.float32)
            stats["intrinsic_reward_mean"] = float(intrinsic.mean())
        compute_gae(buffer, self.cfg.gamma, self.cfg.lam)
        ev = explained_variance(buffer.values.astype(np.float64), buffer.returns)
        if ev is not None:
            stats["explained_variance"] = ev
        return stats

    def update(self, buffer: RolloutBuffer) -> Dict[str, float]:
        stats, self.learning_rate = update(buffer, self.net, self.cfg, self.optimizer, self.rng,
                                           self.learning_rate, self.symmetry, self.reducer)
        if self.curiosity is not None:
            stats["rnd_loss"] = self.curiosity.train(buffer.obs, self.rng, self.cfg.epochs, self.cfg.num_minibatches)
        return stats

    def iteration(self, env: VecEnv, state: RolloutState, tracker: Optional[EpisodeTracker] = None) -> Dict[str, float]:
        buffer = self.collect(env, state, tracker)
        stats = self.process(buffer)
        stats.update(self.update(buffer))
        return stats


__all__ = [
    "PpoConfig",
    "RolloutState",
    "RolloutBuffer",
    "Minibatch",
    "EpisodeSummary",
    "EpisodeTracker",
    "collect_rollout",
    "compute_gae",
    "normalize_advantages",
    "explained_variance",
    "ppo_loss",
    "adapt_lr",
    "build_batch",
    "update",
    "PPO",
    "LR_MIN",
    "LR_MAX",
]
