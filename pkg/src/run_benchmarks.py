#!/usr/bin/env python3
"""
驗收情境執行腳本
逐一跑完各個學習 / 格式情境，列出 ✅/❌ 並輸出 pandas 報表；任一情境失敗時結束碼為 1。

用法：
    python run_benchmarks.py                       # 全部情境，5 個種子
    python run_benchmarks.py --only pendulum lqr   # 指定情境
    python run_benchmarks.py --seeds 2 --plot      # 少量種子並輸出學習曲線
"""

import argparse
import json
import math
import os
import sys
import threading
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

# 添加當前目錄到Python路徑
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from autodiff import Tape, Tensor, numeric_grad
from distributed import TcpCommunicator, WorkerIdentity
from envs import PendulumEnv, lqr_oracle, make_env
from extensions import builtin_symmetry, symmetry_defect
from networks import GaussianActorCritic, NetworkConfig, policy_value
from optim import Adam, parameter_count
from ppo import PPO, PpoConfig, RolloutBuffer, RolloutState, collect_rollout, compute_gae, update
from runner import Checkpoint, RunConfig, Runner, evaluate_network, load_metrics

CONFIG_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "configs"))


class Outcome:
    """單一情境（或單一種子）的量測結果。"""

    def __init__(self, scenario: str, metric: str, value: float, threshold: str, passed: bool,
                 seed: Optional[int] = None, seconds: float = 0.0, decisive: bool = True):
        self.scenario = scenario
        self.metric = metric
        self.value = value
        self.threshold = threshold
        self.passed = bool(passed)
        self.seed = seed
        self.seconds = seconds
        # 單一種子的結果只供參考，是否通過由 majority 決定
        self.decisive = decisive

    def as_row(self) -> Dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "metric": self.metric,
            "value": self.value,
            "threshold": self.threshold,
            "passed": self.passed,
            "seconds": round(self.seconds, 1),
        }


class BenchmarkSuite:
    """依設定檔訓練並量測；每個情境回傳 Outcome 清單。"""

    def __init__(self, out_dir: str, seeds: int = 5, verbose: bool = False):
        self.out_dir = Path(out_dir)
        self.seeds = list(range(seeds))
        self.verbose = verbose
        self.metrics_files: Dict[str, List[str]] = {}

    # ------------------------ 工具 ------------------------ #
    def load_config(self, name: str) -> Dict:
        with open(os.path.join(CONFIG_DIR, f"{name}.json"), "r", encoding="utf-8") as f:
            return json.load(f)

    def train(self, name: str, seed: int, patch: Optional[Callable[[Dict], None]] = None) -> Runner:
        data = self.load_config(name)
        data["seed"] = seed
        data["out_dir"] = str(self.out_dir / f"{name}_s{seed}")
        if patch is not None:
            patch(data)
        runner = Runner(RunConfig.from_dict(data), verbose=self.verbose)
        runner.learn()
        self.metrics_files.setdefault(name, []).append(runner.metrics_path)
        return runner

    def majority(self, scenario: str, outcomes: List[Outcome]) -> Outcome:
        """至少 4/5（比例 0.8）的種子通過才算通過。"""
        wins = sum(o.passed for o in outcomes)
        need = math.ceil(0.8 * len(outcomes))
        return Outcome(scenario, "seeds_passed", wins, f">= {need}/{len(outcomes)}", wins >= need,
                       seconds=sum(o.seconds for o in outcomes))

    # ------------------------ 情境 ------------------------ #
    def gradients(self) -> List[Outcome]:
        """100 組隨機 MLP + 損失的組合，32 / 64 位元解析梯度對中央差分（ε = 1e-3，64 位元計算）。"""
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        worst = {np.float32: 0.0, np.float64: 0.0}
        for _ in range(100):
            dims = [int(d) for d in rng.integers(1, 5, size=int(rng.integers(2, 4)))]
            arrays = []
            for a, b in zip(dims[:-1], dims[1:]):
                arrays += [rng.normal(size=(a, b)), rng.normal(size=b)]
            x = rng.normal(size=(3, dims[0]))

            def forward(params, dtype):
                h = Tensor(x, dtype=dtype)
                for i in range(0, len(params), 2):
                    h = h @ params[i] + params[i + 1]
                    if i + 2 < len(params):
                        h = h.tanh()
                return h.square().sum() + h.exp().mean()

            for dtype in worst:
                params = [Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]
                with Tape() as tape:
                    loss = forward(params, dtype)
                tape.backward(loss)
                for i, p in enumerate(params):
                    def loss_at(v, i=i):
                        shadow = [Tensor(v if j == i else a, dtype=np.float64) for j, a in enumerate(arrays)]
                        return forward(shadow, np.float64).item()

                    num = numeric_grad(loss_at, arrays[i].copy())
                    err = np.abs(p.grad.astype(np.float64) - num) / np.maximum(1.0, np.abs(num))
                    worst[dtype] = max(worst[dtype], float(err.max()))
        seconds = time.perf_counter() - t0
        return [
            Outcome("gradients", "max_rel_error_f32", worst[np.float32], "<= 1e-2", worst[np.float32] <= 1e-2,
                    seconds=seconds),
            Outcome("gradients", "max_rel_error_f64", worst[np.float64], "<= 1e-4", worst[np.float64] <= 1e-4),
        ]

    def timeout_bootstrap(self) -> List[Outcome]:
        t0 = time.perf_counter()
        out = []
        for name, check, threshold in (
            ("constant_reward_bootstrap", lambda v: abs(v - 100.0) <= 10.0, "100 ± 10"),
            ("constant_reward_no_bootstrap", lambda v: v < 25.0, "< 25"),
        ):
            runner = self.train(name, 0)
            env = make_env("constant_reward", 256, seed=99)
            value = float(policy_value(runner.net, env.reset_all()).mean())
            out.append(Outcome(name, "mean_value", value, threshold, check(value), 0,
                               time.perf_counter() - t0))
            t0 = time.perf_counter()
        return out

    def lqr(self) -> List[Outcome]:
        optimal = lqr_oracle().expected_return
        per_seed = []
        for seed in self.seeds:
            t0 = time.perf_counter()
            runner = self.train("point_mass_ppo", seed)
            ret = evaluate_network(runner.net, "point_mass", 1000, True, seed=1000 + seed)["mean_return"]
            gap = abs(ret - optimal) / abs(optimal)
            per_seed.append(Outcome("lqr_ppo", "relative_gap", gap, "<= 0.10", gap <= 0.10, seed,
                                    time.perf_counter() - t0, decisive=False))
        return per_seed + [self.majority("lqr_ppo", per_seed)]

    def pendulum(self, config: str = "pendulum_ppo") -> List[Outcome]:
        per_seed = []
        for seed in self.seeds:
            t0 = time.perf_counter()
            runner = self.train(config, seed)
            ret = evaluate_network(runner.net, "pendulum", 100, True, seed=1000 + seed)["mean_return"]
            per_seed.append(Outcome(config, "mean_return", ret, ">= -300", ret >= -300.0, seed,
                                    time.perf_counter() - t0, decisive=False))
        return per_seed + [self.majority(config, per_seed)]

    def symmetry(self) -> List[Outcome]:
        t0 = time.perf_counter()
        out = []
        spec = builtin_symmetry("pendulum")

        # (a) 擴增後的批次大小
        net = GaussianActorCritic(PendulumEnv(1).obs_schema, 1, NetworkConfig(hidden_sizes=[64, 64]))
        algo = PPO(net, PpoConfig(rollout_horizon=24, epochs=1, num_minibatches=1), symmetry=spec)
        env = PendulumEnv(64, seed=0)
        stats = algo.iteration(env, RolloutState.initial(env, net))
        out.append(Outcome("symmetry", "batch_size", stats["batch_size"], "== 2·24·64",
                           stats["batch_size"] == 2 * 24 * 64, 0, time.perf_counter() - t0))

        # (b) 等變性缺陷，(c) 回報
        rng = np.random.default_rng(123)
        theta = rng.uniform(-math.pi, math.pi, 10_000)
        states = np.stack([np.cos(theta), np.sin(theta), rng.uniform(-8.0, 8.0, 10_000)], axis=1)
        t0 = time.perf_counter()
        plain = self.train("pendulum_ppo", 0)
        mirrored = self.train("pendulum_symmetry", 0)
        d_plain = symmetry_defect(plain.net, states, spec)
        d_sym = symmetry_defect(mirrored.net, states, spec)
        ratio = d_plain / max(d_sym, 1e-12)
        out.append(Outcome("symmetry", "defect_ratio", ratio, ">= 10", ratio >= 10.0, 0,
                           time.perf_counter() - t0))
        ret = evaluate_network(mirrored.net, "pendulum", 100, True, seed=1000)["mean_return"]
        out.append(Outcome("symmetry", "mean_return", ret, ">= -300", ret >= -300.0, 0))
        return out

    def rnd(self) -> List[Outcome]:
        out = []
        t0 = time.perf_counter()
        plain = self.train("sparse_chain_ppo", 0)
        rate = evaluate_network(plain.net, "sparse_chain", 100, False, seed=1000)["success_rate"]
        out.append(Outcome("sparse_chain_ppo", "success_rate", rate, "< 0.05", rate < 0.05, 0,
                           time.perf_counter() - t0))
        per_seed = []
        for seed in self.seeds:
            t0 = time.perf_counter()
            runner = self.train("sparse_chain_rnd", seed)
            rate = evaluate_network(runner.net, "sparse_chain", 100, False, seed=1000 + seed)["success_rate"]
            per_seed.append(Outcome("sparse_chain_rnd", "success_rate", rate, ">= 0.80", rate >= 0.80, seed,
                                    time.perf_counter() - t0, decisive=False))
        return out + per_seed + [self.majority("sparse_chain_rnd", per_seed)]

    def recurrence(self) -> List[Outcome]:
        out = []
        for name, check, threshold in (
            ("memory_recall_gru", lambda r: r >= 0.90, ">= 0.90"),
            ("memory_recall_ff", lambda r: r <= 0.60, "<= 0.60"),
        ):
            t0 = time.perf_counter()
            runner = self.train(name, 0)
            rate = evaluate_network(runner.net, "memory_recall", 200, True, seed=1000)["success_rate"]
            out.append(Outcome(name, "reward_rate", rate, threshold, check(rate), 0, time.perf_counter() - t0))
        return out

    def distill(self) -> List[Outcome]:
        t0 = time.perf_counter()
        optimal = lqr_oracle().expected_return
        runner = self.train("point_mass_distill", 0)
        last = load_metrics(runner.metrics_path).iloc[-1]
        ret = evaluate_network(runner.net, "point_mass", 1000, True, seed=1000)["mean_return"]
        gap = abs(ret - optimal) / abs(optimal)
        mse = float(last["held_out_action_mse"])
        seconds = time.perf_counter() - t0
        return [
            Outcome("distill", "relative_gap", gap, "<= 0.05", gap <= 0.05, 0, seconds),
            Outcome("distill", "held_out_action_mse", mse, "< 1e-2", mse < 1e-2, 0),
        ]

    def privileged(self) -> List[Outcome]:
        """專家讀完整狀態（expert 群組），學生只讀帶雜訊的 policy 群組；回報差距需在 15% 內。"""
        t0 = time.perf_counter()
        runner = self.train("point_mass_privileged_distill", 0)
        overrides = dict(runner.cfg.env.overrides)
        expert = runner.algo.expert
        routed = runner.net.actor_group == "policy" and expert.required_group == "expert" \
            and overrides.get("obs_noise", 0.0) > 0
        expert_ret = _expert_return(expert, "point_mass", 1000, 1000, overrides)
        ret = evaluate_network(runner.net, "point_mass", 1000, True, seed=1000, overrides=overrides)["mean_return"]
        gap = abs(ret - expert_ret) / abs(expert_ret)
        seconds = time.perf_counter() - t0
        return [
            Outcome("privileged_distill", "observation_routing", float(routed), "== 1", routed, 0, seconds),
            Outcome("privileged_distill", "relative_gap", gap, "<= 0.15", gap <= 0.15, 0),
        ]

    def distributed(self) -> List[Outcome]:
        """2 × 32 環境的資料平行更新對 1 × 64 環境；10 次最佳化步。"""
        t0 = time.perf_counter()
        cfg = PpoConfig(num_minibatches=2)  # 5 epochs × 2 = 10 步
        net_cfg = NetworkConfig(hidden_sizes=[64, 64])
        schema = PendulumEnv(1).obs_schema

        collector = GaussianActorCritic(schema, 1, net_cfg, seed=0)
        env = PendulumEnv(64, seed=0)
        buf = compute_gae(collect_rollout(env, collector, 24, RolloutState.initial(env, collector),
                                          np.random.default_rng(0)), cfg.gamma, cfg.lam)

        single = GaussianActorCritic(schema, 1, net_cfg, seed=0)
        update(buf, single, cfg, Adam(single.named_parameters()), ShardShuffle([0, 1], 32, cfg.num_minibatches))

        def two_workers():
            nets = [GaussianActorCritic(schema, 1, net_cfg, seed=0) for _ in range(2)]
            halves = [_env_slice(buf, slice(0, 32)), _env_slice(buf, slice(32, 64))]
            n = parameter_count(nets[0].named_parameters())
            coord = TcpCommunicator(WorkerIdentity(0, 2, "127.0.0.1", 0), n)
            comms = [coord, TcpCommunicator(WorkerIdentity(1, 2, "127.0.0.1", coord.bound_port), n)]
            errors = []

            def work(r):
                try:
                    comms[r].connect()
                    update(halves[r], nets[r], cfg, Adam(nets[r].named_parameters()),
                           np.random.default_rng(r), reducer=comms[r])
                except Exception as e:  # noqa: BLE001
                    errors.append(e)

            threads = [threading.Thread(target=work, args=(r,)) for r in range(2)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            for c in comms:
                c.close()
            if errors:
                raise errors[0]
            return nets

        first, second = two_workers(), two_workers()
        ref = single.state_dict()
        gap = max(float(np.abs(v - ref[k]).max()) for k, v in first[0].state_dict().items())
        repeat = all(np.array_equal(v, second[r].state_dict()[k])
                     for r in range(2) for k, v in first[r].state_dict().items())
        seconds = time.perf_counter() - t0
        return [
            Outcome("distributed", "max_abs_gap", gap, "<= 1e-5", gap <= 1e-5, 0, seconds),
            Outcome("distributed", "repeat_bit_identical", float(repeat), "== 1", repeat, 0),
        ]

    def determinism(self) -> List[Outcome]:
        t0 = time.perf_counter()

        def shortened(tag):
            def patch(data):
                data["max_iterations"] = 5
                data["env"]["num_envs"] = 16
                data["out_dir"] = str(self.out_dir / f"determinism_{tag}")
            return patch

        runs = [self.train("pendulum_ppo", 0, shortened(tag)) for tag in ("a", "b")]
        frames = [load_metrics(r.metrics_path).drop(columns=["wall_time_s", "steps_per_second"]) for r in runs]
        same_metrics = frames[0].equals(frames[1])
        paths = [Path(r.cfg.out_dir) / "model_5.ckpt" for r in runs]
        ckpts = [Checkpoint.load(str(p)) for p in paths]
        same_params = all(np.array_equal(v, ckpts[1].arrays[k]) for k, v in ckpts[0].arrays.items())
        reload_ok = all(c.to_bytes() == p.read_bytes() for c, p in zip(ckpts, paths))
        ok = same_metrics and same_params and reload_ok
        return [Outcome("determinism", "identical_runs", float(ok), "== 1", ok, 0, time.perf_counter() - t0)]


def _expert_return(expert, env_name: str, episodes: int, seed: int, overrides: Dict) -> float:
    """專家在與學生相同的評估環境上跑一個完整 episode 的平均回報。"""
    env = make_env(env_name, episodes, seed=seed, **{**overrides, "random_episode_start": False})
    expert.reset(episodes)
    obs = env.reset_all()
    start = np.ones(episodes, dtype=np.float32)
    total = np.zeros(episodes)
    for _ in range(env.max_episode_length):
        res = env.step(expert.act(obs, start))
        total += res.reward
        obs = res.obs
        start = res.dones.astype(np.float32)
    return float(total.mean())


class ShardShuffle:
    """單一程序的參考洗牌：第 k 個 minibatch 恰為各 worker 第 k 個 minibatch 的聯集。

    worker r 以 default_rng(seeds[r]) 洗牌自己的 [T×shard_envs] 切片；
    只適用於前饋批次（樣本索引 = t·B + b）。
    """

    def __init__(self, seeds: List[int], shard_envs: int, num_minibatches: int):
        self.rngs = [np.random.default_rng(s) for s in seeds]
        self.shard_envs = shard_envs
        self.num_minibatches = num_minibatches

    def permutation(self, n: int) -> np.ndarray:
        world = len(self.rngs)
        per_worker = n // world
        if per_worker * world != n or per_worker % self.num_minibatches:
            raise ValueError(f"無法把 {n} 筆樣本均分給 {world} 個 worker × {self.num_minibatches} 個 minibatch")
        total_envs = world * self.shard_envs
        chunks: List[List[np.ndarray]] = [[] for _ in range(self.num_minibatches)]
        for r, rng in enumerate(self.rngs):
            t, j = np.divmod(rng.permutation(per_worker), self.shard_envs)
            global_idx = t * total_envs + r * self.shard_envs + j
            for k, part in enumerate(np.array_split(global_idx, self.num_minibatches)):
                chunks[k].append(part)
        return np.concatenate([np.concatenate(c) for c in chunks])


def _env_slice(buf: RolloutBuffer, sl: slice) -> RolloutBuffer:
    fields = {}
    for name, value in vars(buf).items():
        if name == "obs":
            fields[name] = {k: v[:, sl] for k, v in value.items()}
        elif value is None:
            fields[name] = None
        elif name in ("bootstrap_value", "hidden_start"):
            fields[name] = value[sl]
        else:
            fields[name] = value[:, sl]
    return RolloutBuffer(**fields)


SCENARIOS = {
    "gradients": BenchmarkSuite.gradients,
    "timeouts": BenchmarkSuite.timeout_bootstrap,
    "lqr": BenchmarkSuite.lqr,
    "pendulum": BenchmarkSuite.pendulum,
    "symmetry": BenchmarkSuite.symmetry,
    "rnd": BenchmarkSuite.rnd,
    "recurrence": BenchmarkSuite.recurrence,
    "distill": BenchmarkSuite.distill,
    "privileged": BenchmarkSuite.privileged,
    "distributed": BenchmarkSuite.distributed,
    "determinism": BenchmarkSuite.determinism,
}


def plot_curves(suite: BenchmarkSuite, path: str, window: int = 10) -> None:
    """各設定檔的平均回報學習曲線（rolling 平滑）。"""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = sorted(suite.metrics_files)
    if not names:
        print("⚠️ 沒有可繪製的指標檔")
        return
    fig, axes = plt.subplots(len(names), 1, figsize=(8, 2.6 * len(names)), squeeze=False)
    for ax, name in zip(axes[:, 0], names):
        for metrics_path in suite.metrics_files[name]:
            frame = load_metrics(metrics_path)
            if frame.empty:
                continue
            curve = frame["mean_episode_return"].astype(float).rolling(window, min_periods=1).mean()
            ax.plot(frame["iteration"], curve, alpha=0.8)
        ax.set_title(name)
        ax.set_xlabel("iteration")
        ax.set_ylabel("mean return")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    print(f"📈 學習曲線已儲存：{path}")


def parse_arguments():
    """解析命令行參數"""
    parser = argparse.ArgumentParser(description="DeskRL 驗收情境")
    parser.add_argument("--only", nargs="+", choices=sorted(SCENARIOS), default=None, help="只執行指定情境")
    parser.add_argument("--seeds", type=int, default=5, help="多種子情境的種子數")
    parser.add_argument("--out", type=str, default=os.path.abspath(os.path.join(os.path.dirname(__file__), "..",
                                                                            "runs", "benchmarks")),
                        help="輸出目錄")
    parser.add_argument("--plot", action="store_true", help="輸出學習曲線 PNG（需要 matplotlib）")
    parser.add_argument("--verbose", action="store_true", help="顯示訓練進度")
    return parser.parse_args()


def main():
    """主函數"""
    args = parse_arguments()
    print("=== DeskRL 驗收情境 ===")
    suite = BenchmarkSuite(args.out, seeds=args.seeds, verbose=args.verbose)
    suite.out_dir.mkdir(parents=True, exist_ok=True)

    outcomes: List[Outcome] = []
    for name in args.only or list(SCENARIOS):
        print(f"\n🚀 情境：{name}")
        try:
            results = SCENARIOS[name](suite)
        except Exception as e:  # noqa: BLE001
            print(f"❌ {name} 執行失敗：{type(e).__name__}：{e}")
            outcomes.append(Outcome(name, "error", float("nan"), "-", False))
            continue
        for o in results:
            mark = "✅" if o.passed else "❌"
            seed = "" if o.seed is None else f" (seed {o.seed})"
            print(f"  {mark} {o.scenario}{seed}：{o.metric} = {o.value:.4g}（需要 {o.threshold}）")
        outcomes.extend(results)

    report = pd.DataFrame([o.as_row() for o in outcomes])
    report_path = suite.out_dir / "report.csv"
    report.to_csv(report_path, index=False)
    print(f"\n📊 報表：{report_path}")
    print(report.to_string(index=False))

    if args.plot:
        plot_curves(suite, str(suite.out_dir / "learning_curves.png"))

    failed = [o for o in outcomes if o.decisive and not o.passed]
    print(f"\n{'='*60}")
    if failed:
        print(f"❌ {len(failed)} 項未通過")
        sys.exit(1)
    print("✅ 全部通過")


if __name__ == "__main__":
    main()
