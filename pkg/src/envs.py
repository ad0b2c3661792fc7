"""
envs - 向量化環境介面與內建分析型環境
------------------------------------------------------------
▸ 同步重置（same-step reset）：結束的環境在同一次 step 內重置，
  重置前的觀測放在 terminal_obs，重置後的觀測放在 obs
▸ 觀測以群組（policy / critic / rnd / expert）組成 ObservationSet
▸ terminated（任務終止）與 timeout（時間截斷）互斥
▸ 每個環境擁有自己的亂數流，鍵為 (seed, 全域環境索引)
▸ reset_all 可把各環境的已走步數預先隨機化，避免 timeout 同步
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Type

import numpy as np

from errors import ConfigError, ConvergenceError, EnvFault, RoutingError, ShapeError


# ===============
# 資料模型
# ===============


class ObservationSet(dict):
    """群組名稱 → [B×d] float32 陣列。"""

    def __init__(self, groups: Optional[Mapping[str, np.ndarray]] = None):
        super().__init__()
        for name, arr in (groups or {}).items():
            self[name] = np.asarray(arr, dtype=np.float32)
        self.validate()

    @property
    def batch_size(self) -> int:
        return next(iter(self.values())).shape[0] if self else 0

    def group(self, name: str) -> np.ndarray:
        if name not in self:
            raise RoutingError(name, self.keys())
        return self[name]

    def validate(self) -> None:
        sizes = {arr.shape[0] for arr in self.values()}
        if len(sizes) > 1:
            raise ShapeError(f"觀測群組 batch 大小不一致：{ {k: v.shape for k, v in self.items()} }")

    def rows(self, idx) -> "ObservationSet":
        return ObservationSet({k: v[idx] for k, v in self.items()})

    def copy(self) -> "ObservationSet":
        return ObservationSet({k: v.copy() for k, v in self.items()})

    def widths(self) -> Dict[str, int]:
        return {k: int(v.shape[-1]) for k, v in self.items()}


@dataclass
class StepResult:
    obs: ObservationSet
    reward: np.ndarray
    terminated: np.ndarray
    timeout: np.ndarray
    terminal_ids: np.ndarray
    terminal_obs: ObservationSet
    success: Optional[np.ndarray] = None

    @property
    def dones(self) -> np.ndarray:
        return self.terminated | self.timeout

    def terminal_row(self, env_id: int) -> Dict[str, np.ndarray]:
        pos = int(np.flatnonzero(self.terminal_ids == env_id)[0])
        return {k: v[pos] for k, v in self.terminal_obs.items()}


@dataclass
class EnvSpec:
    num_envs: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    max_episode_length: int
    obs_schema: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_episode_length < 1:
            raise ConfigError("max_episode_length 必須 ≥ 1")
        if np.any(np.asarray(self.action_low) >= np.asarray(self.action_high)):
            raise ConfigError("動作下界必須小於上界")


# ===============
# 單步動力學（可同時用於純量與向量）
# ===============


def point_mass_step(p, v, u, dt: float = 0.05):
    """v′ = v + dt·u；p′ = p + dt·v′；獎勵在轉移前的狀態上計算。"""
    reward = -(p * p + 0.1 * v * v + 0.01 * u * u)
    v_next = v + dt * u
    p_next = p + dt * v_next
    return p_next, v_next, reward


def wrap_angle(theta):
    """映射到 (−π, π]。"""
    return theta - 2.0 * math.pi * np.ceil((theta - math.pi) / (2.0 * math.pi))


def pendulum_step(theta, theta_dot, u, dt: float = 0.05, g: float = 10.0, m: float = 1.0, l: float = 1.0):
    """θ=0 為直立；半隱式 Euler，角速度截斷於 ±8。"""
    reward = -(wrap_angle(theta) ** 2 + 0.1 * theta_dot ** 2 + 0.001 * u ** 2)
    acc = (3.0 * g / (2.0 * l)) * np.sin(theta) + (3.0 / (m * l * l)) * u
    theta_dot_next = np.clip(theta_dot + dt * acc, -8.0, 8.0)
    theta_next = theta + dt * theta_dot_next
    return theta_next, theta_dot_next, reward


def sparse_chain_step(p, a, goal: float = 9.5):
    p_next = np.clip(p + 0.1 * a, 0.0, 10.0)
    terminated = p_next >= goal
    reward = np.where(terminated, 1.0, 0.0)
    return p_next, reward, terminated


def memory_recall_step(cue, t, a, query_step: int = 12):
    """回傳 (reward, terminated)；只有在 t == query_step 時依 a·c 的正負給獎勵並結束。"""
    at_query = np.asarray(t) == query_step
    reward = np.where(at_query & (np.asarray(a) * np.asarray(cue) > 0), 1.0, 0.0)
    return reward, at_query


# ===============
# 向量化環境基底
# ===============


class VecEnv:
    """B 個同型環境；子類別提供初始分佈、轉移與觀測。"""

    name = "base"
    action_dim = 1
    action_low: Sequence[float] = (-1.0,)
    action_high: Sequence[float] = (1.0,)
    default_episode_length = 200
    state_dim = 1
    has_success = False

    def __init__(self, num_envs: int, seed: int = 0, random_episode_start: bool = True,
                 env_offset: int = 0, max_episode_length: Optional[int] = None):
        if num_envs < 1:
            raise ConfigError("num_envs 必須 ≥ 1")
        self.num_envs = int(num_envs)
        self.seed = int(seed)
        self.random_episode_start = bool(random_episode_start)
        self.env_offset = int(env_offset)
        self.max_episode_length = int(max_episode_length or self.default_episode_length)
        self.spec = EnvSpec(
            num_envs=self.num_envs,
            action_dim=self.action_dim,
            action_low=np.asarray(self.action_low, dtype=np.float64),
            action_high=np.asarray(self.action_high, dtype=np.float64),
            max_episode_length=self.max_episode_length,
        )
        self._rngs: List[np.random.Generator] = []
        self.state = np.zeros((self.num_envs, self.state_dim))
        self.elapsed = np.zeros(self.num_envs, dtype=np.int64)
        self.episode_step = np.zeros(self.num_envs, dtype=np.int64)
        self.reset_all(self.seed)
        self.spec.obs_schema = self._observe().widths()

    # ------------------------ 子類別實作 ------------------------ #
    def _sample_initial(self, env_id: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _transition(self, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
        """更新 self.state，回傳 (reward, terminated, success)。"""
        raise NotImplementedError

    def _observe(self) -> ObservationSet:
        raise NotImplementedError

    # ------------------------ 介面 ------------------------ #
    @property
    def obs_schema(self) -> Dict[str, int]:
        return dict(self.spec.obs_schema)

    def _reset_ids(self, ids: np.ndarray) -> None:
        for b in ids:
            self.state[b] = self._sample_initial(int(b), self._rngs[b])
        self.elapsed[ids] = 0
        self.episode_step[ids] = 0

    def reset_all(self, seed: Optional[int] = None) -> ObservationSet:
        if seed is not None:
            self.seed = int(seed)
        self._rngs = [np.random.default_rng([self.seed, self.env_offset + b]) for b in range(self.num_envs)]
        self._reset_ids(np.arange(self.num_envs))
        if self.random_episode_start:
            self.elapsed[:] = [rng.integers(0, self.max_episode_length) for rng in self._rngs]
        return self._observe()

    def step(self, actions) -> StepResult:
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.num_envs, self.action_dim):
            raise ShapeError(f"動作需為 [{self.num_envs}×{self.action_dim}]，收到 {actions.shape}")
        bad = np.flatnonzero(~np.isfinite(actions).all(axis=1))
        if bad.size:
            raise EnvFault(f"環境 {int(bad[0])} 收到非有限動作 {actions[bad[0]].tolist()}", int(bad[0]))
        u = np.clip(actions, self.spec.action_low, self.spec.action_high)

        reward, terminated, success = self._transition(u)
        terminated = np.asarray(terminated, dtype=bool)
        self.elapsed += 1
        self.episode_step += 1
        timeout = (self.elapsed >= self.max_episode_length) & ~terminated

        ids = np.flatnonzero(terminated | timeout)
        terminal_obs = ObservationSet()
        if ids.size:
            terminal_obs = self._observe().rows(ids)
            self._reset_ids(ids)
        return StepResult(
            obs=self._observe(),
            reward=np.asarray(reward, dtype=np.float32),
            terminated=terminated,
            timeout=timeout,
            terminal_ids=ids,
            terminal_obs=terminal_obs,
            success=None if success is None else np.asarray(success, dtype=bool),
        )


# ===============
# 內建環境
# ===============


class PointMassEnv(VecEnv):
    """一維質點（LQR 驗證環境）；只有 timeout。"""

    name = "point_mass"
    action_low = (-10.0,)
    action_high = (10.0,)
    state_dim = 2
    dt = 0.05

    def __init__(self, num_envs: int, seed: int = 0, obs_noise: float = 0.0, **kwargs):
        self.obs_noise = float(obs_noise)
        super().__init__(num_envs, seed, **kwargs)

    def _sample_initial(self, env_id, rng):
        return rng.uniform(-1.0, 1.0, size=2)

    def _transition(self, u):
        p, v = self.state[:, 0], self.state[:, 1]
        p2, v2, reward = point_mass_step(p, v, u[:, 0], self.dt)
        self.state = np.stack([p2, v2], axis=1)
        return reward, np.zeros(self.num_envs, dtype=bool), None

    def _observe(self):
        exact = self.state.astype(np.float32)
        policy = exact
        if self.obs_noise > 0:
            noise = np.stack([rng.standard_normal(2) for rng in self._rngs])
            policy = (self.state + self.obs_noise * noise).astype(np.float32)
        return ObservationSet({"policy": policy, "critic": exact, "expert": exact})


class PendulumEnv(VecEnv):
    """單擺擺起；θ=0 為直立。"""

    name = "pendulum"
    action_low = (-2.0,)
    action_high = (2.0,)
    state_dim = 2
    dt = 0.05

    def _sample_initial(self, env_id, rng):
        theta = -rng.uniform(-math.pi, math.pi)  # (−π, π]
        return np.array([theta, rng.uniform(-1.0, 1.0)])

    def _transition(self, u):
        th, thd = self.state[:, 0], self.state[:, 1]
        th2, thd2, reward = pendulum_step(th, thd, u[:, 0], self.dt)
        self.state = np.stack([th2, thd2], axis=1)
        return reward, np.zeros(self.num_envs, dtype=bool), None

    def _observe(self):
        th, thd = self.state[:, 0], self.state[:, 1]
        obs = np.stack([np.cos(th), np.sin(th), thd], axis=1).astype(np.float32)
        return ObservationSet({"policy": obs, "critic": obs, "expert": obs})


class SparseChainEnv(VecEnv):
    """稀疏獎勵鏈：從 0 出發，到達 9.5 才得到 1。"""

    name = "sparse_chain"
    default_episode_length = 256
    has_success = True

    def _sample_initial(self, env_id, rng):
        return np.zeros(1)

    def _transition(self, u):
        p2, reward, terminated = sparse_chain_step(self.state[:, 0], u[:, 0])
        self.state = p2[:, None]
        return reward, terminated, terminated

    def _observe(self):
        x = (self.state / 10.0).astype(np.float32)
        return ObservationSet({"policy": x, "critic": x, "rnd": x, "expert": x})


class MemoryRecallEnv(VecEnv):
    """開頭顯示提示 c，t = query_step 時詢問；動作與 c 同號得 1。"""

    name = "memory_recall"
    has_success = True
    state_dim = 1

    def __init__(self, num_envs: int, seed: int = 0, query_step: int = 12, **kwargs):
        self.query_step = int(query_step)
        kwargs.setdefault("max_episode_length", self.query_step + 1)
        super().__init__(num_envs, seed, **kwargs)

    def _sample_initial(self, env_id, rng):
        return np.array([1.0 if rng.random() < 0.5 else -1.0])

    def _transition(self, u):
        reward, terminated = memory_recall_step(self.state[:, 0], self.episode_step, u[:, 0], self.query_step)
        return reward, terminated, np.where(terminated, reward > 0, False)

    def _observe(self):
        cue = self.state[:, 0]
        t = self.episode_step
        cue_signal = np.where(t == 0, cue, 0.0)
        query = (t == self.query_step).astype(np.float64)
        phase = t / self.query_step
        policy = np.stack([cue_signal, query, phase], axis=1).astype(np.float32)
        expert = np.stack([cue, query, phase], axis=1).astype(np.float32)
        return ObservationSet({"policy": policy, "critic": policy, "expert": expert})


class ConstantRewardEnv(VecEnv):
    """每步獎勵 1、永不終止，只會 timeout；用於驗證 timeout bootstrap。"""

    name = "constant_reward"
    default_episode_length = 50

    def _sample_initial(self, env_id, rng):
        return np.zeros(1)

    def _transition(self, u):
        return np.ones(self.num_envs), np.zeros(self.num_envs, dtype=bool), None

    def _observe(self):
        x = np.ones((self.num_envs, 1), dtype=np.float32)
        # critic 看得到截斷進度，才能分辨「還剩幾步」
        phase = (self.elapsed / self.max_episode_length).astype(np.float32)[:, None]
        return ObservationSet({"policy": x, "critic": np.concatenate([x, phase], axis=1), "expert": x})


ENV_REGISTRY: Dict[str, Type[VecEnv]] = {
    cls.name: cls for cls in (PointMassEnv, PendulumEnv, SparseChainEnv, MemoryRecallEnv, ConstantRewardEnv)
}


def make_env(name: str, num_envs: int, seed: int = 0, **overrides) -> VecEnv:
    if name not in ENV_REGISTRY:
        raise ConfigError(f"未知的環境：{name}（可用 {sorted(ENV_REGISTRY)}）")
    try:
        return ENV_REGISTRY[name](num_envs, seed=seed, **overrides)
    except TypeError as e:
        raise ConfigError(f"環境 {name} 的覆寫參數不合法：{overrides}（{e}）") from None


# ===============
# LQR 解析解（PointMass 的驗收基準）
# ===============


class LqrSolution(NamedTuple):
    gain: np.ndarray
    riccati: np.ndarray
    expected_return: float
    iterations: int


def point_mass_system(dt: float = 0.05):
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[dt * dt], [dt]])
    return A, B


def lqr_rollout_return(gain: np.ndarray, episodes: int = 10_000, horizon: int = 200, dt: float = 0.05,
                       gamma: float = 1.0, seed: int = 0) -> float:
    """u = −Kx（截斷於 ±10）在初始分佈上的平均回報。"""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(episodes, 2))
    p, v = x[:, 0], x[:, 1]
    k = np.asarray(gain, dtype=np.float64).reshape(-1)
    total = np.zeros(episodes)
    discount = 1.0
    for _ in range(horizon):
        u = np.clip(-(k[0] * p + k[1] * v), -10.0, 10.0)
        p, v, r = point_mass_step(p, v, u, dt)
        total += discount * r
        discount *= gamma
    return float(total.mean())


def lqr_oracle(dt: float = 0.05, q: Sequence[float] = (1.0, 0.1), r: float = 0.01, gamma: float = 1.0,
               episodes: int = 10_000, horizon: int = 200, seed: int = 0, tol: float = 1e-10,
               max_iterations: int = 100_000) -> LqrSolution:
    """離散 Riccati 迭代到 ΔP < tol；gamma < 1 時使用折扣形式。"""
    A, B = point_mass_system(dt)
    Q = np.diag(np.asarray(q, dtype=np.float64))
    R = np.array([[float(r)]])
    As, Bs = math.sqrt(gamma) * A, math.sqrt(gamma) * B

    P = Q.copy()
    for it in range(1, max_iterations + 1):
        S = R + Bs.T @ P @ Bs
        K = np.linalg.solve(S, Bs.T @ P @ As)
        P_next = Q + As.T @ P @ As - As.T @ P @ Bs @ K
        delta = float(np.max(np.abs(P_next - P)))
        P = P_next
        if delta < tol:
            break
    else:
        raise ConvergenceError(f"Riccati 迭代 {max_iterations} 次仍未收斂（ΔP={delta:.3e}）")

    # 折扣形式下 K 針對原系統：u = −K x，K = (R + γBᵀPB)⁻¹ γ BᵀPA
    gain = np.linalg.solve(R + gamma * B.T @ P @ B, gamma * B.T @ P @ A)
    expected = lqr_rollout_return(gain, episodes, horizon, dt, gamma, seed)
    return LqrSolution(gain=gain, riccati=P, expected_return=expected, iterations=it)


def riccati_residual(P: np.ndarray, dt: float = 0.05, q: Sequence[float] = (1.0, 0.1), r: float = 0.01) -> float:
    A, B = point_mass_system(dt)
    Q = np.diag(np.asarray(q, dtype=np.float64))
    R = np.array([[float(r)]])
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return float(np.max(np.abs(P - rhs)))


__all__ = [
    "ObservationSet",
    "StepResult",
    "EnvSpec",
    "VecEnv",
    "PointMassEnv",
    "PendulumEnv",
    "SparseChainEnv",
    "MemoryRecallEnv",
    "ConstantRewardEnv",
    "ENV_REGISTRY",
    "make_env",
    "point_mass_step",
    "pendulum_step",
    "sparse_chain_step",
    "memory_recall_step",
    "wrap_angle",
    "LqrSolution",
    "point_mass_system",
    "lqr_rollout_return",
    "lqr_oracle",
    "riccati_residual",
]
