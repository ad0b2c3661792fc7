"""
runner - 訓練流程編排
------------------------------------------------------------
Runner 擁有環境與演算法：rollout → (擴充) → update → 記錄 → checkpoint。
另含設定檔驗證、checkpoint / 匯出檔格式、評估與 JSON-lines 指標。

Checkpoint 格式：
    "RLCKPT01" | u32 header_len | JSON header | float32 LE 參數（依 header 順序）
匯出檔相同容器，magic 為 "RLPOL001"，只含 actor 均值（與 GRU）參數。
"""

from __future__ import annotations

import json
import math
import os
import struct
import time
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import jsonschema
import numpy as np
import pandas as pd
from tqdm import tqdm

from autodiff import Tensor, no_grad
from distill import Distillation, DistillConfig, LqrExpert, PolicyExpert, collect_expert_states
from distributed import CHECKSUM_INTERVAL, WorkerIdentity, make_communicator, worker_seed
from envs import ENV_REGISTRY, VecEnv, make_env
from errors import ConfigError, EvaluationError, FormatError
from extensions import CuriosityModule, RndConfig, SymmetrySpec, builtin_symmetry
from networks import GaussianActorCritic, NetworkConfig, gru_step, policy_act
from optim import parameter_count
from ppo import PPO, EpisodeTracker, PpoConfig, RolloutState

CKPT_MAGIC = b"RLCKPT01"
EXPORT_MAGIC = b"RLPOL001"
FORMAT_VERSION = 1
_LEN = struct.Struct("<I")

METRIC_KEYS = (
    "iteration",
    "total_env_steps",
    "wall_time_s",
    "mean_episode_return",
    "mean_episode_length",
    "surrogate_loss",
    "value_loss",
    "entropy",
    "approx_kl",
    "learning_rate",
    "clip_fraction",
    "symmetry_loss",
    "intrinsic_reward_mean",
    "distill_loss",
    "held_out_action_mse",
    "explained_variance",
    "success_rate",
    "steps_per_second",
)
TIMING_KEYS = ("wall_time_s", "steps_per_second")


# ===============
# 設定檔
# ===============

_OBJECT = {"type": "object"}

RUN_CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["env", "algo"],
    "additionalProperties": False,
    "properties": {
        "env": {
            "type": "object",
            "required": ["name"],
            "additionalProperties": False,
            "properties": {
                "name": {"enum": sorted(ENV_REGISTRY)},
                "num_envs": {"type": "integer", "minimum": 1},
                "overrides": _OBJECT,
            },
        },
        "algo": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ppo": _OBJECT,
                "distill": {
                    "type": "object",
                    "properties": {
                        "expert": {
                            "type": "object",
                            "required": ["kind"],
                            "properties": {
                                "kind": {"enum": ["lqr", "checkpoint"]},
                                "path": {"type": "string"},
                            },
                        },
                    },
                },
            },
            "oneOf": [{"required": ["ppo"]}, {"required": ["distill"]}],
        },
        "network": _OBJECT,
        "extensions": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"symmetry": _OBJECT, "rnd": _OBJECT},
        },
        "seed": {"type": "integer", "minimum": 0},
        "max_iterations": {"type": "integer", "minimum": 0},
        "log_interval": {"type": "integer", "minimum": 1},
        "checkpoint_interval": {"type": "integer", "minimum": 0},
        "out_dir": {"type": "string"},
    },
}


def validate_config_dict(data: Mapping) -> None:
    validator = jsonschema.Draft7Validator(RUN_CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        where = "/".join(str(p) for p in first.absolute_path) or "(root)"
        raise ConfigError(f"設定檔驗證失敗於 {where}：{first.message}")


@dataclass
class EnvConfig:
    name: str
    num_envs: int = 64
    overrides: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {"name": self.name, "num_envs": self.num_envs, "overrides": dict(self.overrides)}


@dataclass
class RunConfig:
    env: EnvConfig
    algo: str = "ppo"
    ppo: Optional[PpoConfig] = None
    distill: Optional[DistillConfig] = None
    expert: Optional[Dict] = None
    network: NetworkConfig = field(default_factory=NetworkConfig)
    symmetry: Optional[SymmetrySpec] = None
    rnd: Optional[RndConfig] = None
    seed: int = 0
    max_iterations: int = 100
    log_interval: int = 1
    checkpoint_interval: int = 50
    out_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, data: Mapping) -> "RunConfig":
        validate_config_dict(data)
        env = EnvConfig(**data["env"])
        algo_block = data["algo"]
        algo = "ppo" if "ppo" in algo_block else "distill"
        ppo_cfg = distill_cfg = expert = None
        if algo == "ppo":
            ppo_cfg = PpoConfig.from_dict(algo_block["ppo"])
        else:
            block = dict(algo_block["distill"])
            expert = dict(block.pop("expert", {"kind": "lqr"}))
            distill_cfg = DistillConfig.from_dict(block)

        try:
            network = NetworkConfig(**data.get("network", {}))
        except TypeError as e:
            raise ConfigError(f"network 區塊不合法：{e}") from None

        ext = data.get("extensions", {})
        if ext and algo != "ppo":
            raise ConfigError("extensions 區塊只能搭配 ppo")
        symmetry = None
        if "symmetry" in ext:
            block = dict(ext["symmetry"])
            builtin = block.pop("builtin", None)
            if builtin:
                symmetry = builtin_symmetry(env.name if builtin is True else builtin, **block)
            else:
                symmetry = SymmetrySpec.from_dict(block)
            if network.recurrent:
                raise ConfigError("對稱擴充只支援前饋策略")
        rnd = RndConfig.from_dict(ext["rnd"]) if "rnd" in ext else None

        return cls(
            env=env, algo=algo, ppo=ppo_cfg, distill=distill_cfg, expert=expert, network=network,
            symmetry=symmetry, rnd=rnd,
            seed=int(data.get("seed", 0)),
            max_iterations=int(data.get("max_iterations", 100)),
            log_interval=int(data.get("log_interval", 1)),
            checkpoint_interval=int(data.get("checkpoint_interval", 50)),
            out_dir=str(data.get("out_dir", "runs/default")),
        )

    def to_dict(self) -> Dict:
        """完整設定（含預設值），可再由 from_dict 讀回。"""
        if self.algo == "ppo":
            algo = {"ppo": self.ppo.to_dict()}
        else:
            algo = {"distill": {**self.distill.to_dict(), "expert": dict(self.expert or {"kind": "lqr"})}}
        out = {
            "env": self.env.to_dict(),
            "algo": algo,
            "network": self.network.to_dict(),
            "seed": self.seed,
            "max_iterations": self.max_iterations,
            "log_interval": self.log_interval,
            "checkpoint_interval": self.checkpoint_interval,
            "out_dir": self.out_dir,
        }
        ext = {}
        if self.symmetry is not None:
            ext["symmetry"] = self.symmetry.to_dict()
        if self.rnd is not None:
            ext["rnd"] = self.rnd.to_dict()
        if ext:
            out["extensions"] = ext
        return out

    @property
    def rollout_horizon(self) -> int:
        return self.ppo.rollout_horizon if self.algo == "ppo" else self.distill.rollout_horizon


def load_run_config(path: str, seed: Optional[int] = None, out_dir: Optional[str] = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"設定檔不是合法 JSON：{path}（{e}）") from None
    if seed is not None:
        data["seed"] = int(seed)
    if out_dir is not None:
        data["out_dir"] = out_dir
    return RunConfig.from_dict(data)


# ===============
# 檔案容器（checkpoint / 匯出）
# ===============


def _dump_header(header: Mapping) -> bytes:
    return json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def atomic_write(path: str, data: bytes) -> None:
    """先寫入同目錄暫存檔再改名；失敗時刪除暫存檔。"""
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def encode_container(magic: bytes, header: Mapping, arrays: Sequence[Tuple[str, np.ndarray]]) -> bytes:
    header = dict(header)
    header["params"] = [{"name": n, "shape": list(np.shape(a))} for n, a in arrays]
    head = _dump_header(header)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
    return magic + _LEN.pack(len(head)) + head + body


def _valid_param_entry(entry) -> bool:
    if not isinstance(entry, dict) or not isinstance(entry.get("name"), str):
        return False
    shape = entry.get("shape")
    return isinstance(shape, list) and all(isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape)


def decode_container(data: bytes, magic: bytes, source: str = "<bytes>") -> Tuple[Dict, "OrderedDict[str, np.ndarray]"]:
    if len(data) < 12 or data[:8] != magic:
        raise FormatError(f"{source}：magic 不符（需要 {magic.decode()}）")
    (header_len,) = _LEN.unpack(data[8:12])
    try:
        header = json.loads(data[12:12 + header_len].decode("utf-8"), object_pairs_hook=OrderedDict)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{source}：header 無法解析（{e}）") from None
    entries = header.get("params") if isinstance(header, dict) else None
    if not isinstance(entries, list):
        raise FormatError(f"{source}：header 缺少 params 清單")
    for i, e in enumerate(entries):
        if not _valid_param_entry(e):
            raise FormatError(f"{source}：params[{i}] 需為 {{name: 字串, shape: 非負整數清單}}，收到 {e!r}")
    sizes = [int(np.prod(e["shape"], dtype=np.int64)) for e in entries]
    expected = 12 + header_len + 4 * sum(sizes)
    if len(data) != expected:
        raise FormatError(f"{source}：檔案長度 {len(data)} 與 header 描述的 {expected} 不符")
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = 12 + header_len
    for entry, n in zip(entries, sizes):
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f4", count=n, offset=offset) \
            .astype(np.float32).reshape(entry["shape"])
        offset += 4 * n
    return header, arrays


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


@dataclass
class Checkpoint:
    header: Dict
    arrays: "OrderedDict[str, np.ndarray]"

    @property
    def config(self) -> Dict:
        return self.header["config"]

    @property
    def iteration(self) -> int:
        return int(self.header["iteration"])

    @property
    def total_env_steps(self) -> int:
        return int(self.header["total_env_steps"])

    def to_bytes(self) -> bytes:
        header = {k: v for k, v in self.header.items() if k != "params"}
        return encode_container(CKPT_MAGIC, header, list(self.arrays.items()))

    def save(self, path: str) -> str:
        atomic_write(path, self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        header, arrays = decode_container(_read_bytes(path), CKPT_MAGIC, path)
        return cls(header=header, arrays=arrays)


def make_checkpoint(cfg: RunConfig, net: GaussianActorCritic, iteration: int, total_env_steps: int,
                    rng: np.random.Generator, obs_schema: Mapping[str, int]) -> Checkpoint:
    header = OrderedDict(
        format_version=FORMAT_VERSION,
        config=cfg.to_dict(),
        iteration=int(iteration),
        total_env_steps=int(total_env_steps),
        rng_state=rng.bit_generator.state,
        obs_schema=dict(obs_schema),
        action_dim=net.action_dim,
    )
    # 透過序列化一次，使記憶體內 header 與讀回的 header 相同
    header = json.loads(_dump_header(header).decode("utf-8"), object_pairs_hook=OrderedDict)
    return Checkpoint(header=header, arrays=net.state_dict())


def network_from_checkpoint(ckpt: Checkpoint) -> Tuple[RunConfig, GaussianActorCritic]:
    cfg = RunConfig.from_dict(ckpt.config)
    net = GaussianActorCritic(ckpt.header["obs_schema"], int(ckpt.header["action_dim"]), cfg.network, cfg.seed)
    net.load_state_dict(ckpt.arrays)
    return cfg, net


# ===============
# 匯出
# ===============


def export_policy(checkpoint_path: str, out_path: str) -> str:
    ckpt = Checkpoint.load(checkpoint_path)
    cfg, net = network_from_checkpoint(ckpt)
    header = OrderedDict(
        format_version=FORMAT_VERSION,
        kind="policy",
        network=cfg.network.to_dict(),
        obs_schema=ckpt.header["obs_schema"],
        action_dim=net.action_dim,
        source_iteration=ckpt.iteration,
    )
    arrays = [(n, p.data) for n, p in net.actor_parameters()]
    atomic_write(out_path, encode_container(EXPORT_MAGIC, header, arrays))
    return out_path


class ExportedPolicy:
    """匯出檔的確定性 觀測 → 動作 函數；遞迴策略以 step 逐步推進隱狀態。"""

    def __init__(self, header: Mapping, arrays: Mapping[str, np.ndarray]):
        if header.get("kind") != "policy":
            raise FormatError("匯出檔 kind 不是 policy")
        self.header = dict(header)
        cfg = NetworkConfig(**header["network"])
        self.net = GaussianActorCritic(header["obs_schema"], int(header["action_dim"]), cfg, seed=0)
        self.net.load_state_dict(arrays, strict=False)
        missing = [n for n, _ in self.net.actor_parameters() if n not in arrays]
        if missing:
            raise FormatError(f"匯出檔缺少參數：{missing}")
        self.hidden: Optional[np.ndarray] = None

    @classmethod
    def load(cls, path: str) -> "ExportedPolicy":
        header, arrays = decode_container(_read_bytes(path), EXPORT_MAGIC, path)
        return cls(header, arrays)

    @property
    def obs_group(self) -> str:
        return self.net.actor_group

    @property
    def is_recurrent(self) -> bool:
        return self.net.is_recurrent

    def step(self, actor_obs: np.ndarray, hidden: Optional[np.ndarray] = None,
             reset: Optional[np.ndarray] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        # 與 policy_act 的均值模式走相同運算；匯出檔不含 critic
        x = Tensor(np.asarray(actor_obs, dtype=np.float32))
        with no_grad():
            if not self.net.is_recurrent:
                return self.net.actor(x).data.copy(), None
            h0 = hidden if hidden is not None else self.net.zero_hidden(x.shape[0])
            h = gru_step(self.net.memory, Tensor(h0), x, reset)
            return self.net.actor(h).data.copy(), h.data.copy()

    def __call__(self, actor_obs: np.ndarray) -> np.ndarray:
        action, self.hidden = self.step(actor_obs, self.hidden)
        return action


# ===============
# 指標
# ===============


def _clean(value):
    if value is None:
        return None
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, (np.integer, int)):
        return int(value)
    return value


def metrics_record(values: Mapping) -> "OrderedDict[str, object]":
    """依固定鍵順序建立一筆指標；缺值為 null。"""
    return OrderedDict((k, _clean(values.get(k))) for k in METRIC_KEYS)


class MetricsWriter:
    def __init__(self, path: str):
        self.path = path
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        open(path, "w", encoding="utf-8").close()

    def write(self, record: Mapping) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_metrics(path: str) -> pd.DataFrame:
    with open(path, "r", encoding="utf-8") as f:
        rows = [json.loads(line) for line in f if line.strip()]
    return pd.DataFrame(rows, columns=list(METRIC_KEYS)) if rows else pd.DataFrame(columns=list(METRIC_KEYS))


# ===============
# 評估
# ===============


def evaluate_network(net: GaussianActorCritic, env_name: str, episodes: int, deterministic: bool = True,
                     seed: int = 0, overrides: Optional[Mapping] = None) -> Dict[str, Optional[float]]:
    """以 num_envs = episodes 的新環境各跑一個完整 episode。"""
    if episodes <= 0:
        raise EvaluationError("評估至少需要 1 個 episode")
    opts = dict(overrides or {})
    opts["random_episode_start"] = False
    opts.pop("env_offset", None)
    env = make_env(env_name, episodes, seed=seed, **opts)
    rng = np.random.default_rng(seed)
    obs = env.reset_all()
    hidden = net.zero_hidden(episodes)
    start = np.ones(episodes, dtype=np.float32)
    returns = np.zeros(episodes)
    lengths = np.zeros(episodes, dtype=np.int64)
    success = np.zeros(episodes, dtype=bool)
    active = np.ones(episodes, dtype=bool)
    mode = "mean" if deterministic else "sample"
    for _ in range(env.max_episode_length):
        step = policy_act(net, obs, mode, rng, hidden, start)
        res = env.step(step.action)
        returns[active] += res.reward[active]
        lengths[active] += 1
        if res.success is not None:
            success |= active & res.success
        active &= ~res.dones
        obs, hidden, start = res.obs, step.hidden, res.dones.astype(np.float32)
        if not active.any():
            break
    report = {
        "episodes": episodes,
        "mean_return": float(returns.mean()),
        "std_return": float(returns.std()),
        "mean_length": float(lengths.mean()),
        "success_rate": float(success.mean()) if env.has_success else None,
    }
    return report


def evaluate(checkpoint_path: str, episodes: int, deterministic: bool = True, seed: Optional[int] = None) -> Dict:
    if episodes <= 0:
        raise EvaluationError("評估至少需要 1 個 episode")
    ckpt = Checkpoint.load(checkpoint_path)
    cfg, net = network_from_checkpoint(ckpt)
    return evaluate_network(net, cfg.env.name, episodes, deterministic,
                            cfg.seed if seed is None else seed, cfg.env.overrides)


# ===============
# Runner
# ===============


@dataclass
class RunResult:
    checkpoint_path: Optional[str]
    metrics_path: Optional[str]
    history: List[Dict]


def build_expert(cfg: RunConfig, teacher: Optional[str] = None):
    spec = dict(cfg.expert or {"kind": "lqr"})
    if teacher is not None:
        spec = {"kind": "checkpoint", "path": teacher}
    if spec["kind"] == "lqr":
        if cfg.env.name != "point_mass":
            raise ConfigError("LQR 專家只適用於 point_mass")
        return LqrExpert.from_oracle(episodes=1000)
    if "path" not in spec:
        raise ConfigError("checkpoint 專家需要 path（或 --teacher）")
    _, teacher_net = network_from_checkpoint(Checkpoint.load(spec["path"]))
    return PolicyExpert(teacher_net)


class Runner:
    """依 RunConfig 建立環境、網路、演算法與擴充，並驅動 learn 迴圈。"""

    def __init__(self, cfg: RunConfig, identity: Optional[WorkerIdentity] = None, teacher: Optional[str] = None,
                 verbose: bool = True):
        self.cfg = cfg
        self.identity = identity
        self.rank = identity.rank if identity else 0
        self.world_size = identity.world_size if identity else 1
        self.verbose = verbose and self.rank == 0

        overrides = dict(cfg.env.overrides)
        self.env: VecEnv = make_env(cfg.env.name, cfg.env.num_envs, seed=cfg.seed,
                                    env_offset=self.rank * cfg.env.num_envs, **overrides)
        self.net = GaussianActorCritic(self.env.obs_schema, self.env.action_dim, cfg.network, seed=cfg.seed)
        self.comm = make_communicator(identity, parameter_count(self.net.named_parameters()), verbose=self.verbose)

        if cfg.algo == "ppo":
            if cfg.symmetry is not None:
                cfg.symmetry.check_network(self.net)
            curiosity = None
            if cfg.rnd is not None:
                if cfg.rnd.group not in self.env.obs_schema:
                    raise ConfigError(f"RND 群組 '{cfg.rnd.group}' 不在環境 {cfg.env.name} 的觀測中")
                curiosity = CuriosityModule(self.env.obs_schema[cfg.rnd.group], cfg.rnd,
                                            seed=worker_seed(cfg.seed, self.rank) + 1000)
            ppo_cfg = replace(cfg.ppo, seed=worker_seed(cfg.ppo.seed + cfg.seed, self.rank))
            self.algo = PPO(self.net, ppo_cfg, cfg.symmetry, curiosity, reducer=self.comm)
        else:
            expert = build_expert(cfg, teacher)
            held_out = None
            if not cfg.network.recurrent:
                held_out_env = make_env(cfg.env.name, cfg.env.num_envs, seed=cfg.seed + 10_000,
                                        **{**overrides, "random_episode_start": False})
                held_out = collect_expert_states(held_out_env, expert, steps=8)
            dcfg = replace(cfg.distill, seed=worker_seed(cfg.distill.seed + cfg.seed, self.rank))
            self.algo = Distillation(self.net, expert, dcfg, reducer=self.comm, held_out=held_out)
            self.algo.begin(self.env)

        self.iteration = 0
        self.total_env_steps = 0
        self.out_dir = Path(cfg.out_dir)
        self.metrics_path = str(self.out_dir / "metrics.jsonl")

    # ------------------------ 檔案 ------------------------ #
    def checkpoint(self) -> Checkpoint:
        return make_checkpoint(self.cfg, self.net, self.iteration, self.total_env_steps, self.algo.rng,
                               self.env.obs_schema)

    def save_checkpoint(self) -> str:
        path = str(self.out_dir / f"model_{self.iteration}.ckpt")
        self.checkpoint().save(path)
        if self.verbose:
            tqdm.write(f"💾 已儲存 checkpoint：{path}")
        return path

    def _write_config(self) -> None:
        data = json.dumps(self.cfg.to_dict(), ensure_ascii=False, indent=2).encode("utf-8")
        atomic_write(str(self.out_dir / "config.json"), data)

    # ------------------------ 訓練 ------------------------ #
    def learn(self) -> RunResult:
        cfg = self.cfg
        is_writer = self.rank == 0
        writer = None
        if is_writer:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._write_config()
            writer = MetricsWriter(self.metrics_path)
        if self.verbose:
            print(f"🚀 開始訓練：{cfg.env.name} / {cfg.algo}，B={cfg.env.num_envs}，"
                  f"T={cfg.rollout_horizon}，迭代 {cfg.max_iterations} 次（world_size={self.world_size}）")

        self.comm.broadcast_params(self.net.named_parameters())
        state = RolloutState.initial(self.env, self.net)
        tracker = EpisodeTracker(self.env.num_envs)
        steps_per_iter = cfg.rollout_horizon * cfg.env.num_envs * self.world_size
        history: List[Dict] = []
        t_start = time.perf_counter()
        window_start = t_start
        window_steps = 0

        for _ in tqdm(range(cfg.max_iterations), disable=not self.verbose, desc="訓練"):
            stats = self.algo.iteration(self.env, state, tracker)
            self.iteration += 1
            self.total_env_steps += steps_per_iter
            window_steps += steps_per_iter

            if self.iteration % cfg.log_interval == 0:
                now = time.perf_counter()
                summary = tracker.drain()
                if summary.count == 0:
                    warnings.warn(f"⚠️ 第 {self.iteration} 次迭代的記錄區間內沒有完成的 episode")
                record = metrics_record({
                    **stats,
                    "iteration": self.iteration,
                    "total_env_steps": self.total_env_steps,
                    "wall_time_s": now - t_start,
                    "mean_episode_return": summary.mean_return,
                    "mean_episode_length": summary.mean_length,
                    "success_rate": summary.success_rate,
                    "learning_rate": self.algo.learning_rate,
                    "steps_per_second": window_steps / max(now - window_start, 1e-9),
                })
                window_start, window_steps = now, 0
                history.append(record)
                if writer is not None:
                    writer.write(record)

            if self.world_size > 1 and self.iteration % CHECKSUM_INTERVAL == 0:
                self.comm.verify_params(self.net.named_parameters())
            if is_writer and cfg.checkpoint_interval and self.iteration % cfg.checkpoint_interval == 0 \
                    and self.iteration != cfg.max_iterations:
                self.save_checkpoint()

        ckpt_path = self.save_checkpoint() if is_writer else None
        if self.world_size > 1:
            self.comm.verify_params(self.net.named_parameters())
            if self.comm.is_coordinator:
                self.comm.shutdown()
            else:
                self.comm.wait_shutdown()
        if self.verbose:
            last = history[-1] if history else {}
            print(f"✅ 訓練完成：迭代 {self.iteration}，環境步數 {self.total_env_steps}，"
                  f"最後平均回報 {last.get('mean_episode_return')}")
        return RunResult(ckpt_path, self.metrics_path if is_writer else None, history)


def run_training(cfg: RunConfig, identity: Optional[WorkerIdentity] = None, teacher: Optional[str] = None,
                 verbose: bool = True) -> RunResult:
    return Runner(cfg, identity, teacher, verbose).learn()


def strip_timing(record: Mapping) -> Dict:
    return {k: v for k, v in record.items() if k not in TIMING_KEYS}


__all__ = [
    "CKPT_MAGIC",
    "EXPORT_MAGIC",
    "METRIC_KEYS",
    "TIMING_KEYS",
    "RUN_CONFIG_SCHEMA",
    "validate_config_dict",
    "EnvConfig",
    "RunConfig",
    "load_run_config",
    "atomic_write",
    "encode_container",
    "decode_container",
    "Checkpoint",
    "make_checkpoint",
    "network_from_checkpoint",
    "export_policy",
    "ExportedPolicy",
    "metrics_record",
    "MetricsWriter",
    "load_metrics",
    "evaluate_network",
    "evaluate",
    "RunResult",
    "build_expert",
    "Runner",
    "run_training",
    "strip_timing",
]
