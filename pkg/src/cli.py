"""fsa-yolo command line: gen, train, eval, detect, gradcheck, bench.

Exit codes: 0 ok, 1 user error (bad flags, missing or malformed files), 2 internal error,
3 verification failure (gradcheck).
"""

import sys
from dataclasses import asdict
from dataclasses import replace
from functools import wraps
from pathlib import Path

import numpy as np
import typer
from PIL import Image
from PIL import ImageDraw

from src.bench import benchmark
from src.checkpoint import CheckpointError
from src.checkpoint import load_checkpoint
from src.checkpoint import save_checkpoint
from src.config import CHECKPOINT_PATH
from src.config import CONF_THRESHOLD
from src.config import DATA_DIR
from src.config import MAX_DETECTIONS
from src.config import NMS_THRESHOLD
from src.config import TRAIN_LOG_PATH
from src.config import worker_threads
from src.dataset import CLASS_NAMES
from src.dataset import DatasetError
from src.dataset import SceneSpec
from src.dataset import generate
from src.dataset import load_dataset
from src.dataset import parse_scene_spec
from src.dataset import read_image
from src.evaluation import TABLE_HEADER
from src.evaluation import evaluate
from src.gradcheck import run_suite
from src.hyper import Hyper
from src.model import VARIANTS
from src.model import build
from src.model import count_parameters
from src.model import variant_config
from src.model_config import ConfigError
from src.model_config import ModelConfig
from src.model_config import load_model_config
from src.observability import get_logger
from src.observability import log_runtime
from src.postprocess import DetBox
from src.postprocess import predict
from src.tensor import ContractError
from src.tensor import ShapeError
from src.tensor import Tensor
from src.tensor import no_grad
from src.train import fit_anchors
from src.train import train as train_model

logger = get_logger(__name__)

EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2
EXIT_VERIFICATION_FAILED = 3
# what click exits with on a bad flag or argument
USAGE_ERROR = 2

USER_ERRORS = (ConfigError, DatasetError, CheckpointError, ContractError, ShapeError, FileNotFoundError)
BOX_COLORS = ((0, 200, 255), (255, 255, 0), (255, 0, 200))

app = typer.Typer(add_completion=False, no_args_is_help=True, help="Desk-scale FSA-YOLO detector.")


def _fail(message: str, code: int = EXIT_USER_ERROR):
    typer.secho(f"Error: {message}", fg=typer.colors.RED, err=True)
    raise typer.Exit(code)


def user_errors(func):
    """Turn expected failures into a one-line diagnostic and exit code 1."""

    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except USER_ERRORS as exc:
            _fail(str(exc).splitlines()[0] if str(exc) else type(exc).__name__)

    return wrapper


def _echo_config(command: str, values: dict) -> None:
    log_runtime(command, worker_threads())
    typer.echo(f"# {command}: resolved config")
    for key, value in values.items():
        typer.echo(f"{key} = {value}")


def _resolve_model_config(config: Path | None, variant: str | None) -> ModelConfig:
    model_config = load_model_config(config) if config else ModelConfig().validate()
    return variant_config(variant, model_config) if variant else model_config


@app.command()
@user_errors
def gen(
    out: Path = typer.Option(Path(DATA_DIR), "--out", help="Output dataset directory"),
    n: int = typer.Option(..., "--n", min=1, help="Number of scenes"),
    seed: int | None = typer.Option(None, "--seed", help="Overrides the scene spec seed"),
    spec: Path | None = typer.Option(None, "--spec", help="Scene spec file (key = value)"),
    tiny_only: bool = typer.Option(False, "--tiny-only", help="Draw every device in the tiny tier"),
) -> None:
    """Render synthetic desk scenes with YOLO-format labels."""
    scene = parse_scene_spec(spec.read_text(), str(spec)) if spec else SceneSpec()
    overrides = {"seed": seed} if seed is not None else {}
    if tiny_only:
        overrides["tiny_only"] = True
    scene = replace(scene, **overrides).validate()
    _echo_config("gen", {"out": out, "n": n, **asdict(scene)})
    try:
        generate(scene, n, out)
    except OSError as exc:
        _fail(f"cannot write to {out}: {exc.strerror or exc}")
    typer.echo(f"wrote {n} scenes to {out}")


@app.command()
@user_errors
def train(
    data: Path = typer.Option(Path(DATA_DIR), "--data", help="Training dataset directory"),
    config: Path | None = typer.Option(None, "--config", help="Model config file (key = value)"),
    epochs: int | None = typer.Option(None, "--epochs", min=1),
    out: Path = typer.Option(Path(CHECKPOINT_PATH), "--out", help="Checkpoint path"),
    seed: int = typer.Option(0, "--seed"),
    batch_size: int | None = typer.Option(None, "--batch-size", min=1),
    lr: float | None = typer.Option(None, "--lr", min=0.0, help="Initial learning rate"),
    log: Path = typer.Option(Path(TRAIN_LOG_PATH), "--log", help="Per-epoch JSON lines"),
    val: Path | None = typer.Option(None, "--val", help="Validation dataset directory"),
    variant: str | None = typer.Option(None, "--variant", help=f"One of {', '.join(VARIANTS)}"),
    eval_every: int | None = typer.Option(None, "--eval-every", min=0),
    autoanchor: bool = typer.Option(True, "--autoanchor/--no-autoanchor"),
    progress: bool = typer.Option(False, "--progress/--no-progress"),
) -> None:
    """Train from scratch and write a checkpoint plus the training log."""
    model_config = _resolve_model_config(config, variant)
    hyper = Hyper().with_overrides(
        epochs=epochs, batch_size=batch_size, lr0=lr, eval_every=eval_every, seed=seed, autoanchor=autoanchor
    )
    dataset = load_dataset(data, model_config.num_classes)
    if len(dataset) == 0:
        _fail(f"{data}: no images found")
    eval_dataset = load_dataset(val, model_config.num_classes) if val else None
    if hyper.autoanchor:
        model_config = fit_anchors(model_config, dataset, seed)
    _echo_config("train", {"data": data, "out": out, "log": log, **hyper.as_dict()})
    typer.echo(model_config.to_text(), nl=False)
    model = build(model_config, seed)
    train_log = train_model(model, dataset, hyper, log_path=log, eval_dataset=eval_dataset, progress=progress)
    save_checkpoint(model, out)
    final = train_log.records[-1]
    typer.echo(f"final loss {final['loss']['total']:.5f}; checkpoint {out}; log {log}")
    if "train_metrics" in final:
        typer.echo(f"train {final['train_metrics']}")


@app.command("eval")
@user_errors
def eval_command(
    data: Path = typer.Option(Path(DATA_DIR), "--data", help="Dataset directory"),
    ckpt: Path = typer.Option(Path(CHECKPOINT_PATH), "--ckpt", help="Checkpoint path"),
    conf: float = typer.Option(CONF_THRESHOLD, "--conf", min=0.0, max=1.0),
    nms: float = typer.Option(NMS_THRESHOLD, "--nms", min=0.0, max=1.0),
    csv_path: Path | None = typer.Option(None, "--csv", help="CSV file to append the result row to"),
) -> None:
    """Precision, recall, mAP@0.5 and mAP@0.5:0.95 of a checkpoint on a dataset."""
    csv_path = csv_path or ckpt.with_suffix(".eval.csv")
    _echo_config("eval", {"data": data, "ckpt": ckpt, "conf": conf, "nms": nms, "csv": csv_path})
    model = load_checkpoint(ckpt)
    typer.echo(model.config.to_text(), nl=False)
    dataset = load_dataset(data, model.config.num_classes)
    report = evaluate(model, dataset, conf_threshold=conf, nms_threshold=nms)
    typer.echo(report.to_text(), nl=False)
    typer.echo(TABLE_HEADER)
    typer.echo(report.table_row())
    report.write_csv(csv_path)


def _annotate(image: np.ndarray, detections: list[DetBox], class_names: list[str]) -> Image.Image:
    pixels = np.clip(np.rint(image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    annotated = Image.fromarray(pixels)
    draw = ImageDraw.Draw(annotated)
    for det in detections:
        color = BOX_COLORS[det.class_id % len(BOX_COLORS)]
        x0, y0 = det.cx - det.w / 2, det.cy - det.h / 2
        draw.rectangle([x0, y0, det.cx + det.w / 2, det.cy + det.h / 2], outline=color, width=1)
        name = class_names[det.class_id] if det.class_id < len(class_names) else str(det.class_id)
        draw.text((x0 + 1, max(0.0, y0 - 10)), f"{name} {det.confidence:.2f}", fill=color)
    return annotated


def quantize_attention(attention: np.ndarray) -> np.ndarray:
    """(1, C, H, W) attention in (0, 1) to an (H, W) uint8 map of the channel mean; half-to-even rounding."""
    mean = attention[0].mean(axis=0)
    return np.clip(np.round(mean * 255.0), 0, 255).astype(np.uint8)


@app.command()
@user_errors
def detect(
    image: Path = typer.Option(..., "--image", help="Image file (PPM or PNG)"),
    ckpt: Path = typer.Option(Path(CHECKPOINT_PATH), "--ckpt", help="Checkpoint path"),
    conf: float = typer.Option(CONF_THRESHOLD, "--conf", min=0.0, max=1.0),
    nms: float = typer.Option(NMS_THRESHOLD, "--nms", min=0.0, max=1.0),
    out: Path | None = typer.Option(None, "--out", help="Output directory (default: next to the image)"),
    dump_attention: Path | None = typer.Option(None, "--dump-attention", help="Directory for FSA maps"),
) -> None:
    """Detect devices in one image; writes `class conf cx cy w h` lines and an annotated copy."""
    out = out or image.parent
    _echo_config("detect", {"image": image, "ckpt": ckpt, "conf": conf, "nms": nms, "out": out})
    if not image.is_file():
        raise FileNotFoundError(f"{image}: no such image")
    model = load_checkpoint(ckpt)
    typer.echo(model.config.to_text(), nl=False)
    pixels = read_image(image)
    size = model.config.input_size
    if pixels.shape[1:] != (size, size):
        _fail(f"{image}: expected a {size}x{size} image, got {pixels.shape[2]}x{pixels.shape[1]}")
    batch = Tensor(pixels[None])
    detections = predict(model, batch, conf, nms, MAX_DETECTIONS)[0]

    out.mkdir(parents=True, exist_ok=True)
    lines = [det.to_line() for det in detections]
    text_path = out / f"{image.stem}.detections.txt"
    text_path.write_text("".join(f"{line}\n" for line in lines))
    class_names = list(CLASS_NAMES[: model.config.num_classes])
    _annotate(pixels, detections, class_names).save(out / f"{image.stem}.annotated.ppm", format="PPM")
    for line in lines:
        typer.echo(line)
    typer.echo(f"{len(detections)} detections written to {text_path}")

    if dump_attention is not None:
        if not model.config.use_fsa:
            _fail("--dump-attention needs a model built with use_fsa = true")
        dump_attention.mkdir(parents=True, exist_ok=True)
        with no_grad():
            maps = model.attention_maps(batch)
        for site, attention in maps.items():
            path = dump_attention / f"{image.stem}_fsa_{site}.pgm"
            Image.fromarray(quantize_attention(attention.data)).save(path, format="PPM")
        typer.echo(f"{len(maps)} attention maps written to {dump_attention}")


@app.command()
def gradcheck(
    seed: int = typer.Option(0, "--seed"),
    case: list[str] | None = typer.Option(None, "--case", help="Run only these cases (repeatable)"),
) -> None:
    """Finite-difference check of every differentiable op, block, FSA and loss term."""
    _echo_config("gradcheck", {"seed": seed, "cases": ", ".join(case) if case else "all"})
    try:
        results = run_suite(seed, case or None)
    except KeyError as exc:
        _fail(str(exc.args[0]))
    for result in results:
        typer.echo(result.to_line())
    failed = [r for r in results if not r.passed]
    typer.echo(f"{len(results) - len(failed)}/{len(results)} passed")
    if failed:
        raise typer.Exit(EXIT_VERIFICATION_FAILED)


@app.command()
@user_errors
def bench(
    config: Path | None = typer.Option(None, "--config", help="Model config file (key = value)"),
    iters: int = typer.Option(10, "--iters", min=1),
    batch_size: int = typer.Option(1, "--batch-size", min=1),
    seed: int = typer.Option(0, "--seed"),
    variant: str | None = typer.Option(None, "--variant"),
) -> None:
    """Median forward latency with a backbone/neck/fsa/heads breakdown."""
    model_config = _resolve_model_config(config, variant)
    _echo_config(
        "bench", {"iters": iters, "batch_size": batch_size, "seed": seed, "threads": worker_threads()}
    )
    typer.echo(model_config.to_text(), nl=False)
    typer.echo(f"planned_parameters = {count_parameters(model_config)}")
    report = benchmark(build(model_config, seed), iters=iters, batch_size=batch_size, seed=seed)
    typer.echo(report.to_text(), nl=False)


def run(argv: list[str] | None = None) -> int:
    """Invoke the CLI and map every outcome to an exit code instead of a traceback."""
    try:
        app(args=argv, prog_name="fsa-yolo")
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else int(exc.code is not None)
        return EXIT_USER_ERROR if code == USAGE_ERROR else code
    except USER_ERRORS as exc:
        typer.secho(f"Error: {exc}", fg=typer.colors.RED, err=True)
        return EXIT_USER_ERROR
    except Exception as exc:
        logger.exception(f"[cli] internal error: {exc}")
        typer.secho(f"Internal error: {type(exc).__name__}: {exc}", fg=typer.colors.RED, err=True)
        return EXIT_INTERNAL_ERROR
    return 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
