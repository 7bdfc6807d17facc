# main.py
"""
命令行入口。

    python main.py gen-data --tasks PickTarget --n 200 --out data/train.jsonl
    python main.py annotate --data data/train.jsonl --mode waypoint --out data/train.jsonl
    python main.py train --config configs/desk.env --data data/train.jsonl --out-dir runs/desk
    python main.py eval --checkpoint runs/desk/checkpoint.bin --tasks PickTarget --episodes 50
    python main.py bench-ahe --costs 300,30,5 --saturate
    python main.py ablate --config configs/desk.env --axis waypoint_target
    python main.py diag-features --checkpoint runs/desk/checkpoint.bin --data data/test.jsonl

退出码：0 成功，1 用法错误，2 运行失败。
"""
import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from config import ExperimentConfig, load_experiment_config, setup_logging
from errors import PivotError

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _csv(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


def _floats(value: str) -> List[float]:
    try:
        return [float(item) for item in _csv(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的数字: {value!r}") from None


def _ints(value: str) -> List[int]:
    try:
        return [int(item) for item in _csv(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的整数: {value!r}") from None


def _load_config(args) -> ExperimentConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "epochs": getattr(args, "epochs", None),
        "tasks": getattr(args, "tasks", None),
        "levels": getattr(args, "levels", None),
        "demos_per_task": getattr(args, "n", None),
        "eval_episodes": getattr(args, "episodes", None),
        "parser_mode": getattr(args, "parser", None),
    }
    return load_experiment_config(getattr(args, "config", None), **overrides)


# --- 子命令 ---

def cmd_gen_data(args) -> None:
    from data_models import SceneVariant
    from dataset import save_dataset
    from sim import generate_dataset

    config = _load_config(args)
    trajectories = generate_dataset(config.tasks, config.demos_per_task, config.seed, config.levels, args.split,
                                    SceneVariant(args.variant), mode=config.waypoint_target_mode)
    save_dataset(trajectories, args.out)
    print(f"✅ 已生成 {len(trajectories)} 条演示 → {args.out}")


def cmd_annotate(args) -> None:
    from dataset import load_dataset, save_dataset
    from waypoints import annotate_dataset

    trajectories = annotate_dataset(load_dataset(args.data), args.mode)
    save_dataset(trajectories, args.out or args.data)
    print(f"✅ 已标注 {len(trajectories)} 条轨迹（{args.mode}）")


def cmd_train(args) -> None:
    from dataset import load_dataset
    from training import train

    config = _load_config(args)
    data_path = args.data or config.train_path
    if data_path is None:
        raise UsageError("train: 需要 --data 或配置项 TRAIN_PATH")
    trajectories = load_dataset(data_path)
    out_dir = args.out_dir or config.output_dir
    result = train(config, trajectories, out_dir)
    first, last = result.records[0].probe_total, result.records[-1].probe_total
    print(f"✅ 训练完成：探针损失 {first:.4f} → {last:.4f}，checkpoint: {result.checkpoint}")


def cmd_eval(args) -> None:
    from data_models import SceneVariant
    from policy import load_policy
    from training import evaluate
    from vlm_agent import parser_factory_for

    policy = load_policy(args.checkpoint)
    # 解析器设置取 --config，缺省时用 checkpoint 里保存的配置
    config = _load_config(args) if args.config else policy.config
    record = evaluate(policy, args.tasks or config.tasks, args.episodes or config.eval_episodes,
                      args.levels or config.levels, [SceneVariant(v) for v in args.variants], args.mode,
                      seed=args.seed, costs_ms=args.costs, parser_factory=parser_factory_for(config, args.parser),
                      output_dir=args.out_dir)
    print(json.dumps(record.model_dump(exclude_none=True), ensure_ascii=False, indent=2))


def cmd_bench_ahe(args) -> None:
    from ahe import ExecutorConfig, benchmark_speedup, chain_stages, run_pipeline, save_trace, trace_metrics

    if len(args.costs) != 3 or (args.rates is not None and len(args.rates) != 3):
        raise UsageError("bench-ahe: --costs 和 --rates 都需要 3 个值")
    report = benchmark_speedup(args.costs, None if args.saturate else args.rates, args.duration)
    print(f"🚀 异步步频 {report.async_step_rate:.2f}/s，同步步频 {report.sync_step_rate:.2f}/s，"
          f"加速比 {report.ratio:.2f}（期望 {report.expected_ratio:.2f}）")
    if args.trace_out:
        rates = args.rates or [3.0, 10.0, 30.0]
        trace = run_pipeline(ExecutorConfig(rates=tuple(rates), duration_s=args.duration, stop_when_done=False),
                             chain_stages(rates, args.costs))
        save_trace(trace, args.trace_out)
        metrics = trace_metrics(trace)
        print(json.dumps(metrics.model_dump(), ensure_ascii=False, indent=2))


def cmd_ablate(args) -> None:
    from graph import run_ablation

    config = _load_config(args)
    table = run_ablation(config, args.axis, args.out_dir or config.output_dir)
    markdown = table.to_markdown()
    print(markdown)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(markdown, encoding="utf-8")


def cmd_diag_features(args) -> None:
    from dataset import load_dataset
    from policy import load_policy
    from training import diag_feature_distances, save_feature_distances

    policy = load_policy(args.checkpoint)
    report = diag_feature_distances(policy, load_dataset(args.data))
    if args.out:
        save_feature_distances(report, args.out)
    print(f"✅ 平均 D1={report.mean_d1:.4f}，平均 D2={report.mean_d2:.4f}，"
          f"D2 < D1 的步占比 {report.d2_below_d1:.1%}")


# --- 参数解析 ---

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pivot", description="桌面规模的路点感知世界模型与异步分层执行器")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="用专家策略生成演示数据")
    p.add_argument("--config")
    p.add_argument("--tasks", type=_csv)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--levels", type=_ints)
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.add_argument("--variant", default="seen",
                   choices=["seen", "unseen_background", "changing_light", "distractors"])
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("annotate", help="路点标注")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", default="waypoint", choices=["waypoint", "pac", "rsc", "next", "interval", "final"])
    p.add_argument("--out")
    p.set_defaults(handler=cmd_annotate)

    p = sub.add_parser("train", help="训练策略")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="闭环评估")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", type=_csv)
    p.add_argument("--episodes", type=int)
    p.add_argument("--levels", type=_ints)
    p.add_argument("--variants", type=_csv, default=["seen"])
    p.add_argument("--mode", choices=["async", "sync"], default="async")
    p.add_argument("--config")
    p.add_argument("--parser", choices=["rule", "wire"], default=None)
    p.add_argument("--costs", type=_floats, default=[0.0, 0.0, 0.0])
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("bench-ahe", help="虚拟时钟下的异步/同步步频对比")
    p.add_argument("--costs", type=_floats, default=[300.0, 30.0, 5.0])
    p.add_argument("--rates", type=_floats)
    p.add_argument("--saturate", action="store_true", help="各阶段频率取 1/耗时")
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--trace-out")
    p.set_defaults(handler=cmd_bench_ahe)

    p = sub.add_parser("ablate", help="消融实验")
    p.add_argument("--config")
    p.add_argument("--axis", required=True,
                   choices=["waypoint_target", "executor", "scene_loss", "action_size", "video_decoder"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("diag-features", help="世界模型特征距离诊断")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_diag_features)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE
    setup_logging(args.log_level)
    try:
        args.handler(args)
    except UsageError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE
    except (PivotError, OSError) as e:
        print(f"❌ 运行失败: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
