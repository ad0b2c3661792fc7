#!/usr/bin/env python3
"""
DeskRL 命令列入口
子命令：train / distill / eval / export
結束碼：0 成功；2 設定或參數錯誤；1 執行期錯誤
"""

import argparse
import json
import os
import sys
from typing import List, Optional

# 添加當前目錄到Python路徑
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from distributed import WorkerIdentity
from errors import ConfigError
from runner import evaluate, export_policy, load_run_config, run_training


def _identity(args) -> Optional[WorkerIdentity]:
    if args.workers is None or args.workers == 1:
        if args.rank not in (None, 0):
            raise ConfigError("--rank 需要搭配 --workers K (K > 1)")
        return None
    if args.rank is None or args.coordinator is None:
        raise ConfigError("--workers K (K > 1) 需要同時指定 --rank 與 --coordinator")
    return WorkerIdentity.parse(args.rank, args.workers, args.coordinator)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed, out_dir=args.out)
    result = run_training(cfg, _identity(args), teacher=getattr(args, "teacher", None), verbose=not args.quiet)
    if result.checkpoint_path:
        print(f"💾 checkpoint：{result.checkpoint_path}")
        print(f"📊 指標：{result.metrics_path}")
    return 0


def cmd_distill(args) -> int:
    cfg = load_run_config(args.config, seed=args.seed, out_dir=args.out)
    if cfg.algo != "distill":
        raise ConfigError(f"{args.config} 不是蒸餾設定（algo.distill）")
    if not os.path.exists(args.teacher):
        raise FileNotFoundError(2, "找不到專家 checkpoint", args.teacher)
    return cmd_train(args)


def cmd_eval(args) -> int:
    report = evaluate(args.checkpoint, args.episodes, deterministic=args.deterministic, seed=args.seed)
    print("📊 評估結果：")
    print(json.dumps(report, ensure_ascii=False, indent=2))
    return 0


def cmd_export(args) -> int:
    path = export_policy(args.checkpoint, args.out)
    print(f"✅ 已匯出策略：{path}")
    return 0


def _add_distributed_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workers", type=int, default=None, help="資料平行的 worker 數")
    p.add_argument("--rank", type=int, default=None, help="本程序的 rank（0 為協調者）")
    p.add_argument("--coordinator", type=str, default=None, help="協調者位址 HOST:PORT")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deskrl", description="DeskRL 強化學習與策略蒸餾")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="依設定檔訓練")
    p.add_argument("--config", required=True, help="JSON 設定檔")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None, help="輸出目錄（覆寫設定檔）")
    p.add_argument("--quiet", action="store_true", help="不顯示進度")
    _add_distributed_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="以專家 checkpoint 蒸餾學生策略")
    p.add_argument("--config", required=True)
    p.add_argument("--teacher", required=True, help="專家 checkpoint")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--quiet", action="store_true")
    _add_distributed_flags(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="評估 checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--deterministic", action="store_true", help="使用均值動作")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="匯出精簡策略檔")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def cli_main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2

    try:
        return args.func(args)
    except ConfigError as e:
        print(f"❌ 設定錯誤：{e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"❌ 找不到檔案：{e.filename}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("⚠️ 已中斷", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"❌ {type(e).__name__}：{e}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
