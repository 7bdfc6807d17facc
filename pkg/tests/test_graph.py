# test_graph.py
import json
import logging

import pytest

from data_models import PrimitiveAction, PrimitiveKind
from errors import ConfigError
from graph import AblationRow, AblationTable, ablation_settings, run_ablation, run_experiment
from primitives import render_do_action
from sim import generate_dataset
from training import load_feature_distances
from vlm_stub import VlmStubServer, stage_of, staged_responder


@pytest.fixture
def experiment_config(tiny_config):
    return tiny_config.model_copy(update={"epochs": 1, "max_episode_steps": 10})


def test_experiment_graph_produces_a_row(tmp_path, experiment_config, caplog):
    caplog.set_level(logging.INFO)
    final = run_experiment(experiment_config, label="tiny", output_dir=str(tmp_path))
    assert final["error_message"] is None
    row = final["row"]
    assert row["label"] == "tiny" and row["status"] == "ok"
    assert 0.0 <= row["success_rate"] <= 1.0
    assert (tmp_path / "metrics.jsonl").exists()
    assert any(r.name == "nodes" and "tiny" in r.getMessage() for r in caplog.records)

    lines = (tmp_path / "report.jsonl").read_text(encoding="utf-8").splitlines()
    assert [json.loads(line)["label"] for line in lines] == ["tiny"]


def test_test_split_feeds_feature_diagnostic(tmp_path, experiment_config):
    final = run_experiment(experiment_config, label="diag", output_dir=str(tmp_path))
    row = final["row"]
    assert final["test_data"]
    assert row["mean_d1"] > 0.0 and row["mean_d2"] > 0.0
    assert 0.0 <= row["d2_below_d1"] <= 1.0
    saved = load_feature_distances(tmp_path / "features.jsonl")
    assert len(saved.series) == len(final["test_data"])
    assert saved.mean_d1 == pytest.approx(row["mean_d1"])


def test_diagnostic_is_skipped_without_test_data(experiment_config):
    train_data = generate_dataset(experiment_config.tasks, 2, experiment_config.seed)
    final = run_experiment(experiment_config, train_data=train_data, test_data=[])
    assert final["error_message"] is None
    assert final["row"]["mean_d1"] is None


def test_wire_parser_is_selected_by_config(experiment_config):
    reach = PrimitiveAction(kind=PrimitiveKind.CLOSE_TO, target="milk")
    responder = staged_responder({
        1: lambda payload: "a milk carton on the table",
        2: lambda payload: '{"actions": [{"action": "move to", "target": "milk"}]}',
        3: lambda payload: render_do_action(reach),
    })
    with VlmStubServer(responder=responder) as stub:
        config = experiment_config.model_copy(update={"parser_mode": "wire", "vlm_base_url": stub.base_url})
        final = run_experiment(config, label="wire")
        stages = [stage_of(p) for p in stub.requests]
    assert final["row"]["status"] == "ok"
    assert stages[:3] == [1, 2, 3]
    assert stages.count(1) == config.eval_episodes * len(config.levels) * len(config.tasks)


def test_missing_data_file_ends_the_graph(experiment_config, tmp_path):
    config = experiment_config.model_copy(update={"train_path": str(tmp_path / "missing.jsonl")})
    final = run_experiment(config)
    assert "missing.jsonl" in final["error_message"]
    assert final.get("row") is None


def test_unimplemented_decoder_stops_before_training(experiment_config):
    config = experiment_config.model_copy(update={"video_decoder": True})
    final = run_experiment(config)
    assert final["error_message"]
    assert final.get("policy") is None


def test_ablation_settings_share_the_seed(experiment_config):
    settings = ablation_settings(experiment_config, "waypoint_target")
    assert [label for label, _, _ in settings] == ["waypoint", "pac", "rsc", "next", "interval", "final"]
    assert {config.seed for _, config, _ in settings} == {experiment_config.seed}
    assert [mode for _, _, mode in ablation_settings(experiment_config, "executor")] == ["async", "sync"]
    assert ablation_settings(experiment_config, "action_size")[1][1].la == experiment_config.la + 2
    with pytest.raises(ConfigError):
        ablation_settings(experiment_config, "colour")


def test_video_decoder_axis_is_skipped(experiment_config):
    table = run_ablation(experiment_config, "video_decoder")
    assert table.row("video_decoder").status == "skipped"


def test_executor_axis_reuses_one_policy(experiment_config):
    table = run_ablation(experiment_config, "executor")
    assert [row.label for row in table.rows] == ["async", "sync"]
    assert table.row("async").final_loss == table.row("sync").final_loss
    assert all(row.status == "ok" for row in table.rows)


def test_markdown_table():
    table = AblationTable(axis="scene_loss", seed=0, rows=[
        AblationRow(label="unsquared", success_rate=0.5, success_by_level={"1": 0.5}, latency_ms=1.234),
        AblationRow(label="squared", status="error", error="boom"),
    ])
    lines = table.to_markdown().splitlines()
    assert len(lines) == 4
    assert lines[2] == "| unsquared | 50.0 | 50.0 | 1.23 | ok |"
    assert lines[3] == "| squared | - | - | - | error |"
    with pytest.raises(KeyError):
        table.row("other")
