import os
import tomllib
from pathlib import Path

import typer

_config_file = Path(__file__).parent.parent / "pyproject.toml"
with _config_file.open("rb") as f:
    _config = tomllib.load(f)

_project_config = _config["project"]
_tool_config = _config["tool"]["config"]

SPYGLASS_HOST = _tool_config["spyglass_host"]
SPYGLASS_PROJECT = _project_config["name"]
DTYPE = _tool_config["dtype"]
CONF_THRESHOLD = float(_tool_config["conf_threshold"])
NMS_THRESHOLD = float(_tool_config["nms_threshold"])
EVAL_CONF_THRESHOLD = float(_tool_config["eval_conf_threshold"])
MATCH_IOU_THRESHOLD = float(_tool_config["match_iou_threshold"])
MAX_DETECTIONS = int(_tool_config["max_detections"])
THREADS = int(_tool_config["threads"])
DATA_DIR = _tool_config["data_dir"]
CHECKPOINT_PATH = _tool_config["checkpoint_path"]
TRAIN_LOG_PATH = _tool_config["train_log_path"]


def worker_threads() -> int:
    """Worker count for per-image parallelism; FSA_THREADS caps it."""
    override = os.environ.get("FSA_THREADS")
    if override:
        try:
            return max(1, int(override))
        except ValueError:
            return THREADS
    return THREADS


# fmt: off
def config_cli(
    # Show all
    all: bool = typer.Option(False, "--all", help="Show all configuration values"),
    # Project keys
    project_name: bool = typer.Option(False, "--project-name", help=_project_config['name']),
    project_version: bool = typer.Option(False, "--project-version", help=_project_config['version']),
    # Numerics
    dtype: bool = typer.Option(False, "--dtype", help=DTYPE),
    # Detection thresholds
    conf_threshold: bool = typer.Option(False, "--conf-threshold", help=str(CONF_THRESHOLD)),
    nms_threshold: bool = typer.Option(False, "--nms-threshold", help=str(NMS_THRESHOLD)),
    eval_conf_threshold: bool = typer.Option(False, "--eval-conf-threshold", help=str(EVAL_CONF_THRESHOLD)),
    match_iou_threshold: bool = typer.Option(False, "--match-iou-threshold", help=str(MATCH_IOU_THRESHOLD)),
    max_detections: bool = typer.Option(False, "--max-detections", help=str(MAX_DETECTIONS)),
    threads: bool = typer.Option(False, "--threads", help=str(THREADS)),
    # Paths
    data_dir: bool = typer.Option(False, "--data-dir", help=DATA_DIR),
    checkpoint_path: bool = typer.Option(False, "--checkpoint-path", help=CHECKPOINT_PATH),
    train_log_path: bool = typer.Option(False, "--train-log-path", help=TRAIN_LOG_PATH),
    spyglass_host: bool = typer.Option(False, "--spyglass-host", help=SPYGLASS_HOST),
) -> None:
# fmt: on
    """Get configuration values from pyproject.toml."""
    if all:
        typer.echo(f"project_name={_project_config['name']}")
        typer.echo(f"project_version={_project_config['version']}")
        typer.echo(f"dtype={DTYPE}")
        typer.echo(f"conf_threshold={CONF_THRESHOLD}")
        typer.echo(f"nms_threshold={NMS_THRESHOLD}")
        typer.echo(f"eval_conf_threshold={EVAL_CONF_THRESHOLD}")
        typer.echo(f"match_iou_threshold={MATCH_IOU_THRESHOLD}")
        typer.echo(f"max_detections={MAX_DETECTIONS}")
        typer.echo(f"threads={worker_threads()}")
        typer.echo(f"data_dir={DATA_DIR}")
        typer.echo(f"checkpoint_path={CHECKPOINT_PATH}")
        typer.echo(f"train_log_path={TRAIN_LOG_PATH}")
        typer.echo(f"spyglass_host={SPYGLASS_HOST}")
        return

    param_map = {
        project_name: _project_config["name"],
        project_version: _project_config["version"],
        dtype: DTYPE,
        conf_threshold: CONF_THRESHOLD,
        nms_threshold: NMS_THRESHOLD,
        eval_conf_threshold: EVAL_CONF_THRESHOLD,
        match_iou_threshold: MATCH_IOU_THRESHOLD,
        max_detections: MAX_DETECTIONS,
        threads: worker_threads(),
        data_dir: DATA_DIR,
        checkpoint_path: CHECKPOINT_PATH,
        train_log_path: TRAIN_LOG_PATH,
        spyglass_host: SPYGLASS_HOST,
    }

    for is_set, value in param_map.items():
        if is_set:
            typer.echo(value)
            return

    typer.secho(
        "Error: No config key specified. Use --help to see available options.", fg=typer.colors.RED, err=True
    )
    raise typer.Exit(1)


def main():
    typer.run(config_cli)

if __name__ == "__main__":
    main()
