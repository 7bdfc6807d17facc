# nodes.py
"""
LangGraph 节点：同步步进图的阶段节点，以及实验工作流的各个节点。
节点不向图外抛异常，失败时返回 {"error_message": ...}，由条件边把流程导向 END。
"""
import json
import logging
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Dict, Optional

from ahe import CAMERA, EnvironmentHook, Mailbox, StageSpec, consume_inputs, executed_record
from dataset import load_dataset
from errors import PivotError
from sim import generate_dataset
from state import ExperimentState, SyncStepState
from training import FEATURES_FILE, diag_feature_distances, evaluate, save_feature_distances, train
from vlm_agent import parser_factory_for
from waypoints import annotate_dataset

logger = logging.getLogger(__name__)

Node = Callable[[Any], Dict[str, Any]]

REPORT_FILE = "report.jsonl"


# --- 同步步进图 ---

def make_stage_node(stage: StageSpec, mailboxes: Dict[str, Mailbox], rates: Dict[str, Fraction], is_last: bool,
                    env: Optional[EnvironmentHook]) -> Node:
    """
    一个阶段节点：读取上游最新值并计算，经过 cost 的模拟耗时后发布。
    出错时保留上一次输出；从未产生过输出的阶段会设置 error_message，本步剩余阶段跳过。
    """
    def node(state: SyncStepState) -> Dict[str, Any]:
        now = state["time"]
        pending, skipped = consume_inputs(stage, state["step"], now, mailboxes, rates)
        if skipped is not None:
            update: Dict[str, Any] = {"records": [skipped], "time": now + stage.cost}
            if mailboxes[stage.name].version == 0:
                update["error_message"] = skipped.error or f"阶段 {stage.name} 没有可用输入"
            return update

        published = now + stage.cost
        version = mailboxes[stage.name].publish(pending.output, published, pending.lineage, pending.origin)
        update = {"records": [executed_record(pending, version, published, stage.cost, is_last)],
                  "time": published}
        if is_last and env is not None:
            env.apply(pending.output)
            mailboxes[CAMERA].publish(env.observe(), published)
            update["env_steps"] = state["env_steps"] + 1
        return update

    node.__name__ = f"stage_{stage.name}"
    return node


def advance_step(state: SyncStepState) -> Dict[str, Any]:
    return {"step": state["step"] + 1, "error_message": None}


# --- 实验工作流 ---

def prepare_dataset(state: ExperimentState) -> Dict[str, Any]:
    """
    节点 1: 准备训练/测试数据。
    状态里已有数据时直接复用；否则按配置读取文件或用专家策略生成。
    """
    if state.get("train_data"):
        return {"error_message": None}
    config = state["config"]
    try:
        config.check_paths()
        if config.train_path:
            train_data = load_dataset(config.train_path)
        else:
            train_data = generate_dataset(config.tasks, config.demos_per_task, config.seed, config.levels, "train")
        if config.test_path:
            test_data = load_dataset(config.test_path)
        else:
            test_data = generate_dataset(config.tasks, max(1, config.demos_per_task // 10), config.seed,
                                         config.levels, "test")
    except PivotError as e:
        return {"error_message": f"数据准备失败: {e}"}
    if not train_data:
        return {"error_message": "训练集为空"}
    logger.info(f"✅ 数据已就绪：训练 {len(train_data)} 条，测试 {len(test_data)} 条")
    return {"train_data": train_data, "test_data": test_data, "error_message": None}


def annotate_data(state: ExperimentState) -> Dict[str, Any]:
    """节点 2: 按配置的监督目标模式重新标注路点。"""
    config = state["config"]
    try:
        return {
            "train_data": annotate_dataset(state["train_data"], config.waypoint_target_mode),
            "test_data": annotate_dataset(state.get("test_data") or [], config.waypoint_target_mode),
            "error_message": None,
        }
    except (PivotError, ValueError) as e:
        return {"error_message": f"路点标注失败: {e}"}


def train_model(state: ExperimentState) -> Dict[str, Any]:
    """节点 3: 训练；状态里已有策略（同一模型换执行模式评估）时跳过。"""
    if state.get("policy") is not None:
        return {"error_message": None}
    config = state["config"]
    if config.video_decoder:
        return {"error_message": "视频解码器分支没有实现"}
    logger.info(f"🚀 训练 {state.get('label', '')}")
    try:
        result = train(config, state["train_data"], state.get("output_dir"))
    except PivotError as e:
        return {"error_message": f"训练失败: {e}"}
    return {"policy": result.policy, "train_metrics": result.records, "error_message": None}


def evaluate_model(state: ExperimentState) -> Dict[str, Any]:
    """节点 4: 闭环评估。"""
    config = state["config"]
    mode = state.get("eval_mode", "async")
    try:
        record = evaluate(state["policy"], config.tasks, config.eval_episodes, config.levels, mode=mode,
                          rates=config.rates, max_steps=config.max_episode_steps,
                          parser_factory=parser_factory_for(config), output_dir=state.get("output_dir"))
    except PivotError as e:
        return {"error_message": f"评估失败: {e}"}
    return {"eval_metrics": record, "error_message": None}


def diagnose_features(state: ExperimentState) -> Dict[str, Any]:
    """节点 5: 在测试轨迹上计算 D1/D2 特征距离，有输出目录时写出序列。"""
    test_data = state.get("test_data") or []
    if not test_data:
        logger.warning("⚠️ 没有测试轨迹，跳过特征距离诊断")
        return {"feature_distances": None, "error_message": None}
    try:
        report = diag_feature_distances(state["policy"], test_data)
    except PivotError as e:
        return {"error_message": f"特征距离诊断失败: {e}"}
    output_dir = state.get("output_dir")
    if output_dir:
        save_feature_distances(report, Path(output_dir) / FEATURES_FILE)
    logger.info(f"✅ 特征距离：D1 {report.mean_d1:.4f}，D2 {report.mean_d2:.4f}，"
                f"D2<D1 占 {report.d2_below_d1:.1%}")
    return {"feature_distances": report, "error_message": None}


def write_report(state: ExperimentState) -> Dict[str, Any]:
    """节点 6: 汇总成消融表的一行，有输出目录时追加到 report.jsonl。"""
    record = state["eval_metrics"]
    train_metrics = state.get("train_metrics") or []
    distances = state.get("feature_distances")
    row = {
        "label": state.get("label", ""),
        "status": "ok",
        "success_rate": record.success_rate,
        "success_by_level": dict(record.success_by_level),
        "latency_ms": record.latency_ms,
        "regrasp_mean": record.regrasp_mean,
        "final_loss": train_metrics[-1].probe_total if train_metrics else None,
        "mean_d1": distances.mean_d1 if distances else None,
        "mean_d2": distances.mean_d2 if distances else None,
        "d2_below_d1": distances.d2_below_d1 if distances else None,
    }
    output_dir = state.get("output_dir")
    if output_dir:
        path = Path(output_dir) / REPORT_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")
    logger.info(f"✅ {row['label']}: 成功率 {record.success_rate:.1%}，每步 {record.latency_ms:.2f} ms")
    return {"row": row, "error_message": None}
