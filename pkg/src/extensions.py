"""
extensions - 機器人常用的輔助技巧
------------------------------------------------------------
▸ 對稱：以帶號置換 (source index, sign) 描述鏡射映射，
  用於資料擴增（鏡射樣本的舊 log-prob 以快照策略重算）與對稱損失
▸ 好奇心：RND 只看設定的觀測群組，內在獎勵 = η·‖f(x̂) − f̄(x̂)‖²
▸ RunningMoments：Welford 批次合併的均值/變異數
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from autodiff import Tape, Tensor, no_grad
from errors import ConfigError
from networks import GaussianActorCritic, RndPair, obs_group, policy_evaluate, rnd_embed
from optim import Adam

SignedPermutation = List[Tuple[int, float]]

OBS_CLAMP = 5.0


# ===============
# 對稱
# ===============


def _check_map(name: str, mapping: Sequence[Tuple[int, float]]) -> None:
    sources = [int(src) for src, _ in mapping]
    if sorted(sources) != list(range(len(mapping))):
        raise ConfigError(f"對稱映射 {name} 不是 0..{len(mapping) - 1} 上的雙射：{sources}")
    if any(float(sign) not in (-1.0, 1.0) for _, sign in mapping):
        raise ConfigError(f"對稱映射 {name} 的符號只能是 ±1")
    m = signed_permutation_matrix(mapping)
    if not np.array_equal(m @ m, np.eye(len(mapping))):
        raise ConfigError(f"對稱映射 {name} 不是對合（套用兩次不等於恆等）")


def signed_permutation_matrix(mapping: Sequence[Tuple[int, float]]) -> np.ndarray:
    """y = x @ M，其中 y[i] = sign_i · x[src_i]。"""
    n = len(mapping)
    m = np.zeros((n, n))
    for i, (src, sign) in enumerate(mapping):
        m[int(src), i] = float(sign)
    return m


def apply_signed_permutation(mapping: Sequence[Tuple[int, float]], x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] != len(mapping):
        raise ConfigError(f"對稱映射寬度 {len(mapping)} 與資料寬度 {x.shape[-1]} 不符")
    src = np.array([int(s) for s, _ in mapping])
    sign = np.array([float(g) for _, g in mapping], dtype=x.dtype)
    return x[..., src] * sign


@dataclass
class SymmetrySpec:
    obs_maps: Dict[str, SignedPermutation]
    action_map: SignedPermutation
    use_augmentation: bool = True
    use_loss: bool = True
    weight: float = 0.5

    def __post_init__(self):
        self.obs_maps = {g: [(int(s), float(v)) for s, v in m] for g, m in self.obs_maps.items()}
        self.action_map = [(int(s), float(v)) for s, v in self.action_map]
        for group, mapping in self.obs_maps.items():
            _check_map(group, mapping)
        _check_map("action", self.action_map)
        if self.weight < 0:
            raise ConfigError("對稱損失權重不可為負")

    @classmethod
    def from_dict(cls, data: Mapping) -> "SymmetrySpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"SymmetrySpec 不認得的欄位：{sorted(unknown)}")
        return cls(**dict(data))

    def to_dict(self) -> Dict:
        return {
            "obs_maps": {g: [[s, v] for s, v in m] for g, m in self.obs_maps.items()},
            "action_map": [[s, v] for s, v in self.action_map],
            "use_augmentation": self.use_augmentation,
            "use_loss": self.use_loss,
            "weight": self.weight,
        }

    def action_matrix(self) -> np.ndarray:
        return signed_permutation_matrix(self.action_map)

    def check_network(self, net: GaussianActorCritic) -> None:
        if net.is_recurrent:
            raise ConfigError("對稱擴充只支援前饋策略")
        for group in {net.actor_group, net.critic_group}:
            if group not in self.obs_maps:
                raise ConfigError(f"對稱設定缺少觀測群組 '{group}' 的映射")
        if len(self.action_map) != net.action_dim:
            raise ConfigError(f"動作映射寬度 {len(self.action_map)} 與動作維度 {net.action_dim} 不符")

    # PPO 更新時的掛勾
    def augment(self, batch, net: GaussianActorCritic):
        return augment_batch(batch, self, net)

    def loss(self, net: GaussianActorCritic, obs: Mapping[str, np.ndarray]) -> Tensor:
        return symmetry_loss(net, obs, self)


def mirror_obs(spec: SymmetrySpec, obs: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    out = {}
    for group, x in obs.items():
        if group not in spec.obs_maps:
            raise ConfigError(f"觀測群組 '{group}' 沒有對稱映射")
        out[group] = apply_signed_permutation(spec.obs_maps[group], x)
    return out


def mirror_actions(spec: SymmetrySpec, actions: np.ndarray) -> np.ndarray:
    return apply_signed_permutation(spec.action_map, actions)


def augment_batch(batch, spec: SymmetrySpec, snapshot: GaussianActorCritic):
    """附加鏡射樣本；A、R、V 原樣複製，舊 log-prob 以 snapshot 重算。"""
    if batch.sequential:
        raise ConfigError("對稱擴增不支援遞迴批次")
    obs_m = mirror_obs(spec, batch.obs)
    act_m = mirror_actions(spec, batch.actions)
    with no_grad():
        lp_m = policy_evaluate(snapshot, obs_m, act_m).log_prob.data
    return replace(
        batch,
        obs={k: np.concatenate([v, obs_m[k]]) for k, v in batch.obs.items()},
        actions=np.concatenate([batch.actions, act_m]),
        old_log_probs=np.concatenate([batch.old_log_probs, lp_m.astype(batch.old_log_probs.dtype)]),
        advantages=np.concatenate([batch.advantages, batch.advantages]),
        returns=np.concatenate([batch.returns, batch.returns]),
        old_values=np.concatenate([batch.old_values, batch.old_values]),
    )


def symmetry_loss(net: GaussianActorCritic, obs: Mapping[str, np.ndarray], spec: SymmetrySpec) -> Tensor:
    """mean‖μ(S s) − S_a μ(s)‖²；只約束均值。"""
    group = net.actor_group
    x = obs_group(obs, group)
    if group not in spec.obs_maps:
        raise ConfigError(f"觀測群組 '{group}' 沒有對稱映射")
    mu = net.actor(Tensor(x))
    mu_mirrored_input = net.actor(Tensor(apply_signed_permutation(spec.obs_maps[group], x)))
    s_act = Tensor(spec.action_matrix().astype(mu.dtype))
    return (mu_mirrored_input - mu @ s_act).square().sum(axes=1).mean()


def symmetry_defect(net: GaussianActorCritic, states: np.ndarray, spec: SymmetrySpec) -> float:
    with no_grad():
        return symmetry_loss(net, {net.actor_group: np.asarray(states, dtype=np.float32)}, spec).item()


_PENDULUM_MAP = [(0, 1.0), (1, -1.0), (2, -1.0)]
_POINT_MASS_MAP = [(0, -1.0), (1, -1.0)]


def builtin_symmetry(env_name: str, **kwargs) -> SymmetrySpec:
    if env_name == "pendulum":
        obs_map = _PENDULUM_MAP
    elif env_name == "point_mass":
        obs_map = _POINT_MASS_MAP
    else:
        raise ConfigError(f"環境 {env_name} 沒有內建的對稱映射")
    maps = {g: list(obs_map) for g in ("policy", "critic", "expert")}
    return SymmetrySpec(obs_maps=maps, action_map=[(0, -1.0)], **kwargs)


# ===============
# 統計量
# ===============


class RunningMoments:
    """Welford 累加器；variance = M2 / max(n−1, 1)。"""

    def __init__(self, shape: Tuple[int, ...] = ()):
        self.shape = tuple(shape)
        self.count = 0
        self.mean = np.zeros(self.shape)
        self.m2 = np.zeros(self.shape)

    def update(self, batch) -> "RunningMoments":
        x = np.asarray(batch, dtype=np.float64).reshape((-1, *self.shape))
        n_b = x.shape[0]
        if n_b == 0:
            return self
        b_mean = x.mean(axis=0)
        b_m2 = ((x - b_mean) ** 2).sum(axis=0)
        total = self.count + n_b
        delta = b_mean - self.mean
        self.mean = self.mean + delta * (n_b / total)
        self.m2 = self.m2 + b_m2 + delta ** 2 * (self.count * n_b / total)
        self.count = total
        return self

    @property
    def var(self) -> np.ndarray:
        return self.m2 / max(self.count - 1, 1)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    def state(self) -> Dict:
        return {"count": self.count, "mean": np.asarray(self.mean).tolist(), "m2": np.asarray(self.m2).tolist()}

    def load_state(self, state: Mapping) -> None:
        self.count = int(state["count"])
        self.mean = np.asarray(state["mean"], dtype=np.float64).reshape(self.shape)
        self.m2 = np.asarray(state["m2"], dtype=np.float64).reshape(self.shape)


def running_update(moments: RunningMoments, batch) -> RunningMoments:
    return moments.update(batch)


# ===============
# RND 好奇心
# ===============


@dataclass
class RndConfig:
    group: str = "rnd"
    embed_dim: int = 32
    reward_scale: float = 1.0
    learning_rate: float = 1e-3
    normalize_reward: bool = True
    normalize_obs: bool = True
    hidden_sizes: List[int] = field(default_factory=lambda: [64, 64])
    activation: str = "elu"

    def __post_init__(self):
        if self.reward_scale < 0:
            raise ConfigError("reward_scale (η) 必須 ≥ 0")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim 必須 ≥ 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate 不可為負")

    @classmethod
    def from_dict(cls, data: Mapping) -> "RndConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"RndConfig 不認得的欄位：{sorted(unknown)}")
        return cls(**dict(data))

    def to_dict(self) -> Dict:
        return asdict(self)


def normalize_rnd_input(moments: Optional[RunningMoments], cfg: RndConfig, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if cfg.normalize_obs and moments is not None and moments.count > 0:
        x = (x - moments.mean) / (moments.std + 1e-8)
    return np.clip(x, -OBS_CLAMP, OBS_CLAMP).astype(np.float32)


def rnd_reward(pair: RndPair, moments: Optional[RunningMoments], cfg: RndConfig, obs: Mapping[str, np.ndarray],
               reward_moments: Optional[RunningMoments] = None) -> np.ndarray:
    """每個樣本的內在獎勵 (≥ 0)；給了 reward_moments 時先更新再除以其標準差。"""
    x_hat = normalize_rnd_input(moments, cfg, obs_group(obs, cfg.group))
    with no_grad():
        target_out, pred_out = rnd_embed(pair, Tensor(x_hat))
    err = np.sum((pred_out.data.astype(np.float64) - target_out.data) ** 2, axis=1) * cfg.reward_scale
    if cfg.normalize_reward and reward_moments is not None:
        reward_moments.update(err)
        if reward_moments.count > 1:
            err = err / (float(reward_moments.std) + 1e-8)
        else:
            warnings.warn("內在獎勵標準差尚不可用，本批不做正規化")
    return err.astype(np.float32)


def rnd_update(pair: RndPair, obs_batch: np.ndarray, cfg: RndConfig, optimizer: Adam,
               moments: Optional[RunningMoments] = None) -> float:
    """predictor 對凍結 target 做一次梯度步，回傳步前的 loss。"""
    obs_batch = np.asarray(obs_batch)
    if obs_batch.ndim < 2 or obs_batch.shape[0] == 0:
        return 0.0
    x_hat = normalize_rnd_input(moments, cfg, obs_batch)
    optimizer.zero_grad()
    with Tape() as tape:
        target_out, pred_out = rnd_embed(pair, Tensor(x_hat))
        loss = (pred_out - target_out).square().sum(axes=1).mean()
    tape.backward(loss)
    optimizer.step(cfg.learning_rate)
    return loss.item()


class CuriosityModule:
    """RND 網路對、觀測與獎勵統計量、predictor 最佳化器。"""

    def __init__(self, input_dim: int, cfg: RndConfig, seed: int = 0):
        self.cfg = cfg
        self.pair = RndPair(input_dim, cfg.embed_dim, cfg.hidden_sizes, cfg.activation, seed)
        self.obs_moments = RunningMoments((input_dim,))
        self.reward_moments = RunningMoments(())
        self.optimizer = Adam(self.pair.predictor_parameters())

    def _flat_group(self, obs_steps: Mapping[str, np.ndarray]) -> Tuple[np.ndarray, Tuple[int, ...]]:
        x = obs_group(obs_steps, self.cfg.group)
        lead = x.shape[:-1]
        return x.reshape(-1, x.shape[-1]), lead

    def intrinsic_rewards(self, obs_steps: Mapping[str, np.ndarray]) -> np.ndarray:
        """先以本批 RND 群組更新觀測統計，再計算 s_t 上的內在獎勵。"""
        flat, lead = self._flat_group(obs_steps)
        if self.cfg.normalize_obs:
            self.obs_moments.update(flat)
        r = rnd_reward(self.pair, self.obs_moments, self.cfg, {self.cfg.group: flat}, self.reward_moments)
        return r.reshape(lead)

    def train(self, obs_steps: Mapping[str, np.ndarray], rng: np.random.Generator, epochs: int = 1,
              num_minibatches: int = 1) -> float:
        flat, _ = self._flat_group(obs_steps)
        n = flat.shape[0]
        losses = []
        for _ in range(epochs):
            for idx in np.array_split(rng.permutation(n), max(1, min(num_minibatches, n))):
                losses.append(rnd_update(self.pair, flat[idx], self.cfg, self.optimizer, self.obs_moments))
        return float(np.mean(losses)) if losses else 0.0

    def named_parameters(self):
        return self.pair.named_parameters()

    def state(self) -> Dict:
        return {"obs_moments": self.obs_moments.state(), "reward_moments": self.reward_moments.state()}

    def load_state(self, state: Mapping) -> None:
        self.obs_moments.load_state(state["obs_moments"])
        self.reward_moments.load_state(state["reward_moments"])


__all__ = [
    "SymmetrySpec",
    "signed_permutation_matrix",
    "apply_signed_permutation",
    "mirror_obs",
    "mirror_actions",
    "augment_batch",
    "symmetry_loss",
    "symmetry_defect",
    "builtin_symmetry",
    "RunningMoments",
    "running_update",
    "RndConfig",
    "normalize_rnd_input",
    "rnd_reward",
    "rnd_update",
    "CuriosityModule",
]
