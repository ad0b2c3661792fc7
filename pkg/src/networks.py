"""
networks - 函數近似器
------------------------------------------------------------
▸ Mlp：仿射/激活交替，輸出層為仿射
▸ GaussianActorCritic：均值網路 + 狀態無關 log_std + 價值網路，可選 GRU 記憶
▸ GruCell：z / r / n 三閘門
▸ RndPair：凍結的 target 與可訓練的 predictor
觀測以群組名稱路由（actor 讀 actor_obs_group，critic 讀 critic_obs_group）。
"""

from __future__ import annotations

import copy
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from autodiff import Tensor, concat, map_unary, no_grad, reshape, sigmoid, stack, tanh
from errors import ConfigError, RoutingError, ShapeError

ACTIVATIONS = ("tanh", "elu", "relu")
_LOG_2 = math.log(2.0)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)


# ===============
# 設定
# ===============


@dataclass
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_sizes: List[int] = field(default_factory=lambda: [64, 64])
    activation: str = "elu"

    def __post_init__(self):
        dims = [self.input_dim, self.output_dim, *self.hidden_sizes]
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"MLP 維度必須 ≥ 1：{dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"不支援的激活函數：{self.activation}（可用 {ACTIVATIONS}）")


@dataclass
class NetworkConfig:
    hidden_sizes: List[int] = field(default_factory=lambda: [64, 64])
    activation: str = "elu"
    recurrent: bool = False
    hidden_dim: int = 32
    actor_obs_group: str = "policy"
    critic_obs_group: str = "critic"
    init_log_std: float = 0.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"不支援的激活函數：{self.activation}")
        if self.hidden_dim < 1 or any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden 維度必須 ≥ 1")

    def to_dict(self) -> Dict:
        return asdict(self)


def obs_group(obs: Mapping[str, np.ndarray], name: str) -> np.ndarray:
    if name not in obs:
        raise RoutingError(name, obs.keys())
    return obs[name]


def activate(x: Tensor, name: str) -> Tensor:
    if name == "tanh":
        return tanh(x)
    if name == "relu":
        return map_unary(x, "relu")
    # elu 以平移後的 softplus 近似，原點為 0
    return map_unary(x, "softplus") - _LOG_2


# ===============
# MLP
# ===============


def init_params(spec: MlpSpec, seed: int, final_scale: float = 1.0) -> List[Tuple[Tensor, Tensor]]:
    """權重 U(±sqrt(1/fan_in))、偏置 0；最後一層權重再乘 final_scale。"""
    rng = np.random.default_rng(seed)
    dims = [spec.input_dim, *spec.hidden_sizes, spec.output_dim]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = math.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if i == len(dims) - 2:
            w = w * final_scale
        layers.append((
            Tensor(w.astype(np.float32), requires_grad=True),
            Tensor(np.zeros(fan_out, dtype=np.float32), requires_grad=True),
        ))
    return layers


class Mlp:
    def __init__(self, spec: MlpSpec, seed: int, final_scale: float = 1.0):
        self.spec = spec
        self.layers = init_params(spec, seed, final_scale)

    def named_parameters(self, prefix: str) -> List[Tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.layers):
            out.append((f"{prefix}.{i}.weight", w))
            out.append((f"{prefix}.{i}.bias", b))
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(mlp: Mlp, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != mlp.spec.input_dim:
        raise ShapeError(f"MLP 輸入需為 [B×{mlp.spec.input_dim}]，收到 {x.shape}")
    h = x
    last = len(mlp.layers) - 1
    for i, (w, b) in enumerate(mlp.layers):
        h = h @ w + b
        if i < last:
            h = activate(h, mlp.spec.activation)
    return h


# ===============
# GRU
# ===============


class GruCell:
    def __init__(self, input_dim: int, hidden_dim: int, seed: int):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        rng = np.random.default_rng(seed)
        bx = math.sqrt(1.0 / input_dim)
        bh = math.sqrt(1.0 / hidden_dim)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        for gate in ("z", "r", "n"):
            self.params[f"W_{gate}"] = Tensor(
                rng.uniform(-bx, bx, size=(input_dim, hidden_dim)).astype(np.float32), requires_grad=True)
            self.params[f"U_{gate}"] = Tensor(
                rng.uniform(-bh, bh, size=(hidden_dim, hidden_dim)).astype(np.float32), requires_grad=True)
            self.params[f"b_{gate}"] = Tensor(np.zeros(hidden_dim, dtype=np.float32), requires_grad=True)

    def named_parameters(self, prefix: str) -> List[Tuple[str, Tensor]]:
        return [(f"{prefix}.{k}", v) for k, v in self.params.items()]

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        p = self.params
        z = sigmoid(x @ p["W_z"] + h @ p["U_z"] + p["b_z"])
        r = sigmoid(x @ p["W_r"] + h @ p["U_r"] + p["b_r"])
        n = tanh(x @ p["W_n"] + (r * h) @ p["U_n"] + p["b_n"])
        return (1.0 - z) * n + z * h


def gru_step(cell: GruCell, h: Tensor, x: Tensor, reset: Optional[np.ndarray] = None) -> Tensor:
    """reset[b]=1 表示此步之前是 episode 邊界，先把 h 歸零再套用 cell。"""
    if reset is not None:
        keep = (1.0 - np.asarray(reset, dtype=h.dtype))[:, None]
        h = h * keep
    return cell.step(x, h)


def gru_rollforward(cell: GruCell, h0: Tensor, xs, reset_mask: np.ndarray) -> Tensor:
    """沿時間依序展開，回傳 [T×B×H] 隱狀態序列。xs 為常數觀測 [T×B×in]。"""
    xs = xs.data if isinstance(xs, Tensor) else np.asarray(xs, dtype=np.float32)
    reset_mask = np.asarray(reset_mask, dtype=np.float32)
    if xs.ndim != 3 or xs.shape[2] != cell.input_dim:
        raise ShapeError(f"GRU 輸入需為 [T×B×{cell.input_dim}]，收到 {xs.shape}")
    if reset_mask.shape != xs.shape[:2] or h0.shape != (xs.shape[1], cell.hidden_dim):
        raise ShapeError(f"reset_mask {reset_mask.shape} / h0 {h0.shape} 與輸入 {xs.shape} 不符")
    h = h0
    outs = []
    for t in range(xs.shape[0]):
        h = gru_step(cell, h, Tensor(xs[t]), reset_mask[t])
        outs.append(h)
    return stack(outs, axis=0)


# ===============
# Actor-Critic
# ===============


class PolicyStep(NamedTuple):
    action: np.ndarray
    log_prob: np.ndarray
    value: np.ndarray
    mean: np.ndarray
    hidden: Optional[np.ndarray]


class PolicyEvaluation(NamedTuple):
    log_prob: Tensor
    entropy: Tensor
    value: Tensor
    mean: Tensor


class GaussianActorCritic:
    """μ(s) + exp(log_std) 的對角高斯策略與 V(s)。"""

    def __init__(self, obs_dims: Mapping[str, int], action_dim: int, cfg: NetworkConfig, seed: int = 0):
        self.cfg = cfg
        self.obs_dims = dict(obs_dims)
        self.action_dim = int(action_dim)
        self.actor_group = cfg.actor_obs_group
        if self.actor_group not in self.obs_dims:
            raise RoutingError(self.actor_group, self.obs_dims.keys())
        self.critic_group = cfg.critic_obs_group if cfg.critic_obs_group in self.obs_dims else self.actor_group

        actor_in = self.obs_dims[self.actor_group]
        critic_in = self.obs_dims[self.critic_group]
        self.memory: Optional[GruCell] = None
        if cfg.recurrent:
            self.memory = GruCell(actor_in, cfg.hidden_dim, seed + 2)
            extra = critic_in if self.critic_group != self.actor_group else 0
            actor_in = cfg.hidden_dim
            critic_in = cfg.hidden_dim + extra

        self.actor = Mlp(MlpSpec(actor_in, self.action_dim, list(cfg.hidden_sizes), cfg.activation), seed, final_scale=0.01)
        self.log_std = Tensor(np.full(self.action_dim, cfg.init_log_std, dtype=np.float32), requires_grad=True)
        self.critic = Mlp(MlpSpec(critic_in, 1, list(cfg.hidden_sizes), cfg.activation), seed + 1)

    # ------------------------ 參數 ------------------------ #
    @property
    def is_recurrent(self) -> bool:
        return self.memory is not None

    @property
    def hidden_dim(self) -> int:
        return self.cfg.hidden_dim if self.is_recurrent else 0

    def actor_parameters(self) -> List[Tuple[str, Tensor]]:
        out = self.memory.named_parameters("memory") if self.memory else []
        return out + self.actor.named_parameters("actor")

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return self.actor_parameters() + [("log_std", self.log_std)] + self.critic.named_parameters("critic")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                if strict:
                    raise ShapeError(f"缺少參數 {name}")
                continue
            arr = np.asarray(state[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise ShapeError(f"參數 {name} shape 不符：{arr.shape} vs {p.shape}")
            p.data[...] = arr

    def clone(self) -> "GaussianActorCritic":
        return copy.deepcopy(self)

    def zero_hidden(self, batch: int) -> Optional[np.ndarray]:
        if not self.is_recurrent:
            return None
        return np.zeros((batch, self.cfg.hidden_dim), dtype=np.float32)

    # ------------------------ 前向 ------------------------ #
    def features(self, obs: Mapping[str, np.ndarray], hidden=None, reset=None):
        """回傳 (actor 輸入, critic 輸入, 新隱狀態)；單步，batch 為 B。"""
        x = Tensor(obs_group(obs, self.actor_group))
        if not self.is_recurrent:
            return x, Tensor(obs_group(obs, self.critic_group)), None
        h0 = hidden if hidden is not None else self.zero_hidden(x.shape[0])
        h = gru_step(self.memory, Tensor(h0), x, reset)
        critic_in = h
        if self.critic_group != self.actor_group:
            critic_in = concat([h, Tensor(obs_group(obs, self.critic_group))], axis=-1)
        return h, critic_in, h

    def value(self, critic_in: Tensor) -> Tensor:
        v = self.critic(critic_in)
        return reshape(v, (v.shape[0],))


def gaussian_log_prob(mean: Tensor, log_std: Tensor, actions: Tensor) -> Tensor:
    """Σ_i [−log σ_i − ½log(2π) − (a_i−μ_i)²/(2σ_i²)]"""
    z = (actions - mean) / log_std.exp()
    per_dim = (-log_std - _HALF_LOG_2PI) - 0.5 * z.square()
    return per_dim.sum(axes=1)


def gaussian_entropy(log_std: Tensor, batch: int) -> Tensor:
    ent = (log_std + _HALF_LOG_2PIE).sum()
    return ent * np.ones(batch, dtype=log_std.dtype)


def policy_act(net: GaussianActorCritic, obs: Mapping[str, np.ndarray], mode: str = "sample",
               rng: Optional[np.random.Generator] = None, hidden=None, reset=None) -> PolicyStep:
    """取樣（或取均值）動作，附 log_prob、價值與下一隱狀態；不記錄梯度。"""
    if mode not in ("sample", "mean"):
        raise ValueError(f"未知的模式：{mode}")
    with no_grad():
        actor_in, critic_in, h = net.features(obs, hidden, reset)
        mu = net.actor(actor_in)
        if mode == "mean":
            action = mu.data.copy()
        else:
            if rng is None:
                raise ValueError("sample 模式需要 rng")
            eps = rng.standard_normal(mu.shape).astype(np.float32)
            action = (mu.data + np.exp(net.log_std.data) * eps).astype(np.float32)
        log_prob = gaussian_log_prob(mu, net.log_std, Tensor(action))
        value = net.value(critic_in)
    return PolicyStep(
        action=action,
        log_prob=log_prob.data.copy(),
        value=value.data.copy(),
        mean=mu.data.copy(),
        hidden=None if h is None else h.data.copy(),
    )


def policy_value(net: GaussianActorCritic, obs: Mapping[str, np.ndarray], hidden=None, reset=None) -> np.ndarray:
    with no_grad():
        _, critic_in, _ = net.features(obs, hidden, reset)
        return net.value(critic_in).data.copy()


def policy_evaluate(net: GaussianActorCritic, obs: Mapping[str, np.ndarray], actions: np.ndarray,
                    hidden_start: Optional[np.ndarray] = None,
                    reset_mask: Optional[np.ndarray] = None) -> PolicyEvaluation:
    """以目前參數重算 log_prob / entropy / value（可微）。

    前饋：obs 群組為 [N×d]、actions 為 [N×A]。
    遞迴：obs 群組為 [T×B×d]、actions 為 [T×B×A]，由 hidden_start 與 reset_mask 重新展開，
    輸出攤平成 T·B。
    """
    actions = np.asarray(actions, dtype=np.float32)
    if not net.is_recurrent:
        actor_in = Tensor(obs_group(obs, net.actor_group))
        critic_in = Tensor(obs_group(obs, net.critic_group))
        if actions.shape != (actor_in.shape[0], net.action_dim):
            raise ShapeError(f"動作 shape {actions.shape} 與觀測 batch {actor_in.shape[0]} 不符")
        flat_actions = actions
    else:
        xs = obs_group(obs, net.actor_group)
        if xs.ndim != 3 or actions.shape != (*xs.shape[:2], net.action_dim):
            raise ShapeError(f"遞迴評估需要 [T×B×·]，收到 obs {xs.shape} / 動作 {actions.shape}")
        T, B = xs.shape[:2]
        if hidden_start is None:
            hidden_start = net.zero_hidden(B)
        if reset_mask is None:
            reset_mask = np.zeros((T, B), dtype=np.float32)
        hs = gru_rollforward(net.memory, Tensor(hidden_start), xs, reset_mask)
        actor_in = reshape(hs, (T * B, net.cfg.hidden_dim))
        critic_in = actor_in
        if net.critic_group != net.actor_group:
            c = obs_group(obs, net.critic_group)
            critic_in = concat([actor_in, Tensor(c.reshape(T * B, -1))], axis=-1)
        flat_actions = actions.reshape(T * B, net.action_dim)

    mu = net.actor(actor_in)
    log_prob = gaussian_log_prob(mu, net.log_std, Tensor(flat_actions))
    entropy = gaussian_entropy(net.log_std, mu.shape[0])
    value = net.value(critic_in)
    return PolicyEvaluation(log_prob=log_prob, entropy=entropy, value=value, mean=mu)


# ===============
# RND
# ===============


class RndPair:
    """target 於初始化後凍結；predictor 可訓練；兩者輸出維度 k。"""

    def __init__(self, input_dim: int, embed_dim: int = 32, hidden_sizes: Sequence[int] = (64, 64),
                 activation: str = "elu", seed: int = 0):
        spec = MlpSpec(input_dim, embed_dim, list(hidden_sizes), activation)
        self.target = Mlp(spec, seed)
        for _, p in self.target.named_parameters("t"):
            p.requires_grad = False
        self.predictor = Mlp(spec, seed + 1)

    @property
    def input_dim(self) -> int:
        return self.predictor.spec.input_dim

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return self.target.named_parameters("rnd.target") + self.predictor.named_parameters("rnd.predictor")

    def predictor_parameters(self) -> List[Tuple[str, Tensor]]:
        return self.predictor.named_parameters("rnd.predictor")


def rnd_embed(pair: RndPair, x: Tensor) -> Tuple[Tensor, Tensor]:
    with no_grad():
        target_out = pair.target(x)
    return target_out, pair.predictor(x)


__all__ = [
    "ACTIVATIONS",
    "MlpSpec",
    "NetworkConfig",
    "Mlp",
    "init_params",
    "mlp_forward",
    "GruCell",
    "gru_step",
    "gru_rollforward",
    "GaussianActorCritic",
    "PolicyStep",
    "PolicyEvaluation",
    "gaussian_log_prob",
    "gaussian_entropy",
    "policy_act",
    "policy_value",
    "policy_evaluate",
    "RndPair",
    "rnd_embed",
    "obs_group",
]
