# graph.py
"""
两个 LangGraph 工作流：
  1. 同步步进图（去掉异步执行器的基线）：parser → scene → action → advance，循环 steps 次；
  2. 实验工作流：prepare_dataset → annotate_data → train_model → evaluate_model → diagnose_features
     → write_report。
以及在实验工作流之上的消融运行器。
"""
import logging
from typing import Any, Dict, List, Literal, Optional, Sequence

from langgraph.graph import END, START, StateGraph
from pydantic import BaseModel

from ahe import EnvironmentHook, Mailbox, StageSpec
from config import ExperimentConfig
from data_models import Trajectory
from errors import ConfigError, PivotError
from nodes import (advance_step, annotate_data, diagnose_features, evaluate_model, make_stage_node, prepare_dataset,
                   train_model, write_report)
from state import ExperimentState, SyncStepState
from training import MetricsRecord

logger = logging.getLogger(__name__)


# --- 同步步进图 ---

def build_sync_step_graph(stages: Sequence[StageSpec], mailboxes: Dict[str, Mailbox],
                          env: Optional[EnvironmentHook] = None, stop_when_done: bool = True) -> StateGraph:
    rates = {s.name: s.rate for s in stages}
    names = [s.name for s in stages]
    workflow = StateGraph(SyncStepState)

    for i, stage in enumerate(stages):
        workflow.add_node(stage.name, make_stage_node(stage, mailboxes, rates, i == len(stages) - 1, env))
    workflow.add_node("advance", advance_step)

    workflow.add_edge(START, names[0])

    # 阶段 i → 阶段 i+1；某阶段从未产生过输出时本步剩余阶段跳过
    for current, following in zip(names, names[1:]):
        def decide_after_stage(state: SyncStepState, _next: str = following) -> str:
            return "advance" if state.get("error_message") else _next
        workflow.add_conditional_edges(current, decide_after_stage, {following: following, "advance": "advance"})
    workflow.add_edge(names[-1], "advance")

    def decide_next_step(state: SyncStepState) -> str:
        if state["step"] >= state["steps"]:
            return "end"
        if stop_when_done and env is not None and env.done:
            return "end"
        return names[0]

    workflow.add_conditional_edges("advance", decide_next_step, {names[0]: names[0], "end": END})
    return workflow


# --- 实验工作流 ---

def decide_after_prepare(state: ExperimentState) -> Literal["annotate_data", "end"]:
    if state.get("error_message"):
        logger.error(f"❌ 流程终止：{state['error_message']}")
        return "end"
    return "annotate_data"


def decide_after_annotate(state: ExperimentState) -> Literal["train_model", "end"]:
    if state.get("error_message"):
        logger.error(f"❌ 流程终止：{state['error_message']}")
        return "end"
    return "train_model"


def decide_after_train(state: ExperimentState) -> Literal["evaluate_model", "end"]:
    if state.get("error_message") or state.get("policy") is None:
        logger.error(f"❌ 流程终止：{state.get('error_message') or '没有得到训练好的策略'}")
        return "end"
    return "evaluate_model"


def decide_after_evaluate(state: ExperimentState) -> Literal["diagnose_features", "end"]:
    if state.get("eval_metrics") is None:
        logger.error(f"❌ 流程终止：{state.get('error_message') or '评估没有产出指标'}")
        return "end"
    return "diagnose_features"


def decide_after_diagnose(state: ExperimentState) -> Literal["write_report", "end"]:
    if state.get("error_message"):
        logger.error(f"❌ 流程终止：{state['error_message']}")
        return "end"
    return "write_report"


def build_experiment_graph() -> StateGraph:
    workflow = StateGraph(ExperimentState)

    workflow.add_node("prepare_dataset", prepare_dataset)
    workflow.add_node("annotate_data", annotate_data)
    workflow.add_node("train_model", train_model)
    workflow.add_node("evaluate_model", evaluate_model)
    workflow.add_node("diagnose_features", diagnose_features)
    workflow.add_node("write_report", write_report)

    workflow.add_edge(START, "prepare_dataset")
    workflow.add_conditional_edges("prepare_dataset", decide_after_prepare,
                                   {"annotate_data": "annotate_data", "end": END})
    workflow.add_conditional_edges("annotate_data", decide_after_annotate,
                                   {"train_model": "train_model", "end": END})
    workflow.add_conditional_edges("train_model", decide_after_train,
                                   {"evaluate_model": "evaluate_model", "end": END})
    workflow.add_conditional_edges("evaluate_model", decide_after_evaluate,
                                   {"diagnose_features": "diagnose_features", "end": END})
    workflow.add_conditional_edges("diagnose_features", decide_after_diagnose,
                                   {"write_report": "write_report", "end": END})
    workflow.add_edge("write_report", END)
    return workflow


def run_experiment(config: ExperimentConfig, label: str = "", eval_mode: str = "async",
                   train_data: Optional[List[Trajectory]] = None, test_data: Optional[List[Trajectory]] = None,
                   policy: Any = None, train_metrics: Optional[List[MetricsRecord]] = None,
                   output_dir: Optional[str] = None) -> ExperimentState:
    app = build_experiment_graph().compile()
    initial: ExperimentState = {"config": config, "label": label, "eval_mode": eval_mode,
                                "train_data": train_data or [], "test_data": test_data or [], "policy": policy,
                                "train_metrics": train_metrics or [],
                                "eval_metrics": None, "feature_distances": None, "output_dir": output_dir, "error_message": None}
    return app.invoke(initial, {"recursion_limit": 20})


# --- 消融 ---

AblationAxis = Literal["waypoint_target", "executor", "scene_loss", "action_size", "video_decoder"]
ABLATION_AXES = ("waypoint_target", "executor", "scene_loss", "action_size", "video_decoder")


class AblationRow(BaseModel):
    label: str
    status: Literal["ok", "skipped", "error"] = "ok"
    success_rate: Optional[float] = None
    success_by_level: Dict[str, float] = {}
    latency_ms: Optional[float] = None
    regrasp_mean: Optional[float] = None
    final_loss: Optional[float] = None
    mean_d1: Optional[float] = None
    mean_d2: Optional[float] = None
    d2_below_d1: Optional[float] = None
    error: Optional[str] = None


class AblationTable(BaseModel):
    axis: str
    seed: int
    rows: List[AblationRow]

    def row(self, label: str) -> AblationRow:
        for row in self.rows:
            if row.label == label:
                return row
        raise KeyError(label)

    def to_markdown(self) -> str:
        levels = sorted({level for row in self.rows for level in row.success_by_level})
        header = ["设置", "成功率"] + [f"L{level}" for level in levels] + ["每步 ms", "状态"]
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for row in self.rows:
            cells = [row.label, _pct(row.success_rate)]
            cells += [_pct(row.success_by_level.get(level)) for level in levels]
            cells += [f"{row.latency_ms:.2f}" if row.latency_ms is not None else "-", row.status]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def _pct(value: Optional[float]) -> str:
    return f"{value * 100:.1f}" if value is not None else "-"


def ablation_settings(config: ExperimentConfig, axis: str) -> List[tuple]:
    """(标签, 配置, 执行模式) 列表；同一条消融轴上的所有设置共享种子。"""
    if axis == "waypoint_target":
        modes = ("waypoint", "pac", "rsc", "next", "interval", "final")
        return [(mode, config.model_copy(update={"waypoint_target_mode": mode}), "async") for mode in modes]
    if axis == "executor":
        return [("async", config, "async"), ("sync", config, "sync")]
    if axis == "scene_loss":
        return [(v, config.model_copy(update={"scene_loss_variant": v}), "async") for v in ("unsquared", "squared")]
    if axis == "action_size":
        return [(f"la={config.la}", config, "async"),
                (f"la={config.la + 2}", config.model_copy(update={"la": config.la + 2}), "async")]
    if axis == "video_decoder":
        return [("video_decoder", config.model_copy(update={"video_decoder": True}), "async")]
    raise ConfigError(f"未知消融轴 {axis!r}，可选 {', '.join(ABLATION_AXES)}")


def run_ablation(config: ExperimentConfig, axis: AblationAxis, output_dir: Optional[str] = None) -> AblationTable:
    """
    对一条消融轴逐个设置训练并评估。数据只生成一次，各设置按自己的监督模式重新标注。
    executor 轴只训练一次，同一个策略分别用异步和同步执行评估。
    """
    settings = ablation_settings(config, axis)
    logger.info(f"🚀 消融 {axis}：{len(settings)} 个设置")
    prepared = prepare_dataset({"config": config})
    if prepared.get("error_message"):
        raise PivotError(prepared["error_message"])
    train_data, test_data = prepared["train_data"], prepared["test_data"]

    rows: List[AblationRow] = []
    shared_policy, shared_metrics = None, None
    for label, setting, eval_mode in settings:
        if setting.video_decoder:
            logger.warning(f"⚠️ {label}: 视频解码器分支没有实现，跳过")
            rows.append(AblationRow(label=label, status="skipped", error="未实现"))
            continue
        out = f"{output_dir}/{axis}/{label}" if output_dir else None
        final = run_experiment(setting, label, eval_mode, train_data, test_data,
                               policy=shared_policy if axis == "executor" else None,
                               train_metrics=shared_metrics if axis == "executor" else None, output_dir=out)
        if final.get("row") is None:
            rows.append(AblationRow(label=label, status="error", error=final.get("error_message")))
            continue
        rows.append(AblationRow(**final["row"]))
        if axis == "executor":
            shared_policy, shared_metrics = final.get("policy"), final.get("train_metrics")
    return AblationTable(axis=axis, seed=config.seed, rows=rows)
