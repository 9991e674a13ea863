import pytest
import typer
from typer.testing import CliRunner

from src.config import config_cli
from src.config import worker_threads

app = typer.Typer()
app.command()(config_cli)

runner = CliRunner()


@pytest.mark.parametrize(
    "flag,expected_output",
    [
        ("--project-name", "fsa-yolo"),
        ("--project-version", "0.1.0"),
        ("--dtype", "float32"),
        ("--conf-threshold", "0.25"),
        ("--nms-threshold", "0.45"),
        ("--eval-conf-threshold", "0.001"),
        ("--match-iou-threshold", "0.5"),
        ("--max-detections", "300"),
        ("--data-dir", "data/synth"),
        ("--checkpoint-path", "runs/fsa_yolo.ckpt"),
        ("--train-log-path", "runs/train_log.jsonl"),
        ("--spyglass-host", "localhost:5013"),
    ],
)
def test_config_returns_single_value(flag: str, expected_output: str):
    result = runner.invoke(app, [flag])

    assert result.exit_code == 0
    assert result.stdout.strip() == expected_output


def test_config_all_returns_all_values():
    result = runner.invoke(app, ["--all"])

    assert result.exit_code == 0
    assert "project_name=fsa-yolo" in result.stdout
    assert "project_version=0.1.0" in result.stdout
    assert "dtype=float32" in result.stdout
    assert "conf_threshold=0.25" in result.stdout
    assert "nms_threshold=0.45" in result.stdout
    assert "eval_conf_threshold=0.001" in result.stdout
    assert "match_iou_threshold=0.5" in result.stdout
    assert "max_detections=300" in result.stdout
    assert "checkpoint_path=runs/fsa_yolo.ckpt" in result.stdout


def test_config_without_flag_fails():
    result = runner.invoke(app, [])

    assert result.exit_code == 1
    assert "Error: No config key specified" in result.output


def test_worker_threads_env_override(monkeypatch):
    monkeypatch.setenv("FSA_THREADS", "1")
    assert worker_threads() == 1

    monkeypatch.setenv("FSA_THREADS", "not-a-number")
    assert worker_threads() == 4

    monkeypatch.delenv("FSA_THREADS")
    assert worker_threads() == 4
