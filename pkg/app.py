# app.py
"""
实验看板：训练/评估指标、世界模型特征距离、AHE 执行轨迹。
    streamlit run app.py -- --run-dir runs/desk
"""
import sys
from pathlib import Path
from typing import Dict, List

import streamlit as st

from ahe import ExecutionTrace, load_trace, trace_metrics
from errors import PivotError
from training import FEATURES_FILE, METRICS_FILE, MetricsRecord, load_feature_distances, read_metrics

TRACE_FILE = "trace.jsonl"


def _default_run_dir() -> str:
    args = sys.argv[1:]
    if "--run-dir" in args and args.index("--run-dir") + 1 < len(args):
        return args[args.index("--run-dir") + 1]
    return "runs/desk"


def loss_series(records: List[MetricsRecord]) -> Dict[str, List[float]]:
    train = [r for r in records if r.kind == "train"]
    return {
        "scene": [r.probe_scene for r in train],
        "action": [r.probe_action for r in train],
        "total": [r.probe_total for r in train],
    }


def trace_timeline(trace: ExecutionTrace) -> Dict[str, List[float]]:
    """每个阶段依次发布的时刻，第 i 个时刻对应版本 i+1。"""
    timeline: Dict[str, List[float]] = {}
    for name in trace.rates:
        executed = trace.stage_records(name, "executed")
        timeline[name] = [r.publish_time for r in executed]
    return timeline


# --- 1. 页面配置 ---

st.set_page_config(page_title="PIVOT 桌面实验看板", layout="wide")
st.title("🤖 路点感知世界模型 · 实验看板")

with st.sidebar:
    st.header("数据来源")
    run_dir = Path(st.text_input("运行目录", value=_default_run_dir()))
    trace_path = st.text_input("执行轨迹文件", value=str(run_dir / TRACE_FILE))
    diag_path = st.text_input("特征距离文件", value=str(run_dir / FEATURES_FILE))

tab_metrics, tab_features, tab_trace = st.tabs(["训练与评估", "特征距离", "AHE 轨迹"])

# --- 2. 训练与评估 ---

with tab_metrics:
    metrics_path = run_dir / METRICS_FILE
    if not metrics_path.exists():
        st.info(f"💡 还没有 {metrics_path}，先运行 `python main.py train`")
    else:
        try:
            records = read_metrics(metrics_path)
        except PivotError as e:
            st.error(f"❌ {e}")
            records = []
        if any(r.kind == "train" for r in records):
            st.subheader("探针批损失")
            st.line_chart(loss_series(records))
        evals = [r for r in records if r.kind == "eval"]
        for record in evals:
            cols = st.columns(4)
            cols[0].metric("执行模式", record.mode or "-")
            cols[1].metric("成功率", f"{record.success_rate:.1%}")
            cols[2].metric("每步延迟 (ms)", f"{record.latency_ms:.2f}" if record.latency_ms is not None else "-")
            cols[3].metric("平均重抓次数", f"{record.regrasp_mean:.2f}" if record.regrasp_mean is not None else "-")
            if record.success_by_level:
                st.bar_chart({"成功率": record.success_by_level})

# --- 3. 特征距离 ---

with tab_features:
    if not Path(diag_path).exists():
        st.info("💡 先运行 `python main.py diag-features --out ...`")
    else:
        try:
            report = load_feature_distances(diag_path)
        except PivotError as e:
            st.error(f"❌ {e}")
        else:
            cols = st.columns(3)
            cols[0].metric("平均 D1", f"{report.mean_d1:.4f}")
            cols[1].metric("平均 D2", f"{report.mean_d2:.4f}")
            cols[2].metric("D2 < D1 的步", f"{report.d2_below_d1:.1%}")
            if report.series:
                index = st.selectbox("轨迹", range(len(report.series)),
                                     format_func=lambda i: f"{i}: {report.series[i].instruction}")
                series = report.series[index]
                st.line_chart({"D1 当前帧": series.d1, "D2 预测": series.d2})

# --- 4. AHE 执行轨迹 ---

with tab_trace:
    if not Path(trace_path).exists():
        st.info("💡 先运行 `python main.py bench-ahe --trace-out ...`")
    else:
        try:
            trace = load_trace(trace_path)
            summary = trace_metrics(trace)
        except PivotError as e:
            st.error(f"❌ {e}")
        else:
            st.caption(f"模式 {trace.mode}，时长 {trace.duration_s:g}s，环境步数 {trace.env_steps}")
            st.dataframe([{"阶段": name, "节拍": m.ticks, "执行": m.executed, "忙碌跳过": m.skipped_busy,
                           "缺输入": m.skipped_starved, "出错": m.errors, "实际频率": round(m.achieved_rate, 3),
                           "平均延迟 ms": round(m.latency_mean_ms, 3)}
                          for name, m in summary.stages.items()])
            for name, times in trace_timeline(trace).items():
                if times:
                    st.write(f"**{name}** 发布时刻")
                    st.line_chart({"时间 s": times, "版本": list(range(1, len(times) + 1))}, x="时间 s", y="版本")
