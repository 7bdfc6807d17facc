# test_app.py
from pathlib import Path

from streamlit.testing.v1 import AppTest

from ahe import ExecutorConfig, chain_stages, run_pipeline, save_trace
from training import (METRICS_FILE, FeatureDistanceReport, FeatureDistanceSeries, MetricsRecord, append_metrics,
                      save_feature_distances)

APP = str(Path(__file__).parent.parent / "app.py")


def _populate(run_dir: Path) -> None:
    for epoch, loss in enumerate([3.0, 2.0, 1.5]):
        append_metrics(run_dir / METRICS_FILE, MetricsRecord(kind="train", epoch=epoch, probe_scene=loss / 3,
                                                             probe_action=loss * 2 / 3, probe_total=loss))
    append_metrics(run_dir / METRICS_FILE, MetricsRecord(kind="eval", mode="async", episodes=4, success_rate=0.75,
                                                         success_by_level={"1": 1.0, "2": 0.5}, latency_ms=1.5))
    series = FeatureDistanceSeries(instruction="pick the milk", d1=[1.0, 0.5, 0.0], d2=[0.4, 0.2, 0.0])
    save_feature_distances(FeatureDistanceReport(series=[series], mean_d1=0.5, mean_d2=0.2, d2_below_d1=2 / 3),
                           run_dir / "features.jsonl")
    trace = run_pipeline(ExecutorConfig(duration_s=1.0, stop_when_done=False), chain_stages((3, 10, 30), (100, 10, 5)))
    save_trace(trace, run_dir / "trace.jsonl")


def test_dashboard_without_runs(tmp_path):
    at = AppTest.from_file(APP, default_timeout=30)
    at.run()
    at.text_input[0].set_value(str(tmp_path)).run()
    assert not at.exception
    assert len(at.info) == 3


def test_dashboard_with_runs(tmp_path):
    _populate(tmp_path)
    at = AppTest.from_file(APP, default_timeout=30)
    at.run()
    at.text_input[0].set_value(str(tmp_path))
    at.text_input[1].set_value(str(tmp_path / "trace.jsonl"))
    at.text_input[2].set_value(str(tmp_path / "features.jsonl"))
    at.run()
    assert not at.exception
    values = [m.value for m in at.metric]
    assert "75.0%" in values and "0.5000" in values
    assert len(at.dataframe) == 1
