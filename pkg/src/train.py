"""SGD training loop: nesterov momentum, decoupled parameter groups, linear warmup then cosine decay."""

import json
import math
import time
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from src.dataset import Dataset
from src.dataset import kmeans_anchors
from src.evaluation import evaluate
from src.fsa import fsa_attention_stats
from src.helpers import timed
from src.helpers import to_jsonable
from src.hyper import Hyper
from src.loss import compute_loss
from src.model import Detector
from src.model_config import ANCHORS_PER_HEAD
from src.model_config import ModelConfig
from src.observability import get_logger
from src.observability import metrics
from src.tensor import ContractError
from src.tensor import Tensor
from src.tensor import backward
from src.tensor import no_grad

logger = get_logger(__name__)


class Sgd:
    """SGD with (nesterov) momentum over three groups: decayed weights, BN scales and shifts, biases."""

    def __init__(self, model: Detector, hyper: Hyper):
        self.hyper = hyper
        self.weights: list[Tensor] = []
        self.norms: list[Tensor] = []
        self.biases: list[Tensor] = []
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("bias", "b1", "b2", "bq", "bk", "bv", "bo"):
                self.biases.append(p)
            elif leaf in ("gamma", "beta"):
                self.norms.append(p)
            else:
                self.weights.append(p)
        self.velocity = {id(p): np.zeros_like(p.data) for p in self.weights + self.norms + self.biases}

    def step(self, lr: float, bias_lr: float, momentum: float) -> None:
        groups = (
            (self.weights, lr, self.hyper.weight_decay),
            (self.norms, lr, 0.0),
            (self.biases, bias_lr, 0.0),
        )
        for params, group_lr, decay in groups:
            for p in params:
                if p.grad is None:
                    continue
                grad = p.grad + decay * p.data if decay else p.grad
                buf = self.velocity[id(p)]
                buf *= momentum
                buf += grad
                update = grad + momentum * buf
                p.data = (p.data - group_lr * update).astype(p.data.dtype, copy=False)


def cosine_factor(epoch: int, epochs: int, lrf: float) -> float:
    """Multiplier on lr0: 1 at epoch 0 falling to lrf at the last epoch."""
    return ((1 - math.cos(epoch * math.pi / max(epochs, 1))) / 2) * (lrf - 1) + 1


def schedule(iteration: int, epoch: int, warmup_iters: int, hyper: Hyper) -> tuple[float, float, float]:
    """(lr, bias_lr, momentum) for one optimizer step."""
    lr = hyper.lr0 * cosine_factor(epoch, hyper.epochs, hyper.lrf)
    if iteration >= warmup_iters:
        return lr, lr, hyper.momentum
    xp = [0, warmup_iters]
    return (
        float(np.interp(iteration, xp, [0.0, lr])),
        float(np.interp(iteration, xp, [hyper.warmup_bias_ratio * hyper.lr0, lr])),
        float(np.interp(iteration, xp, [hyper.warmup_momentum, hyper.momentum])),
    )


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    path: Path | None = None

    def append(self, record: dict) -> None:
        record = to_jsonable(record)
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def losses(self, key: str = "total") -> list[float]:
        return [r["loss"][key] for r in self.records]

    @classmethod
    def read(cls, path: str | Path) -> "TrainLog":
        path = Path(path)
        return cls([json.loads(line) for line in path.read_text().splitlines() if line.strip()])


def fit_anchors(config: ModelConfig, dataset: Dataset, seed: int) -> ModelConfig:
    """Config with k-means anchors from the dataset labels; unchanged when there are too few boxes."""
    n = ANCHORS_PER_HEAD * len(config.strides)
    anchors = kmeans_anchors(dataset.labels, config.input_size, n=n, seed=seed)
    if anchors is None:
        logger.warning(f"[fit_anchors] fewer than {n} labeled boxes, keeping configured anchors")
        return config
    grouped = tuple(tuple(anchors[i : i + ANCHORS_PER_HEAD]) for i in range(0, n, ANCHORS_PER_HEAD))
    logger.info(f"[fit_anchors] anchors: {grouped}")
    return config.with_overrides(anchors=grouped)


def _attention_stats(model: Detector, images: Tensor) -> dict[str, dict[str, float]]:
    if not model.fsa:
        return {}
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            maps = model.attention_maps(images)
    finally:
        model.train(was_training)
    return {name: fsa_attention_stats(attention) for name, attention in maps.items()}


@timed
def train(
    model: Detector,
    dataset: Dataset,
    hyper: Hyper,
    log_path: str | Path | None = None,
    eval_dataset: Dataset | None = None,
    progress: bool = False,
) -> TrainLog:
    """Train in place. Batch order comes from `hyper.seed`, so a fixed seed gives a fixed loss curve."""
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    if dataset.image_size != model.config.input_size:
        raise ContractError(
            f"dataset images are {dataset.image_size} px, model expects {model.config.input_size}"
        )
    log_path = Path(log_path) if log_path else None
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")
    log = TrainLog(path=log_path)
    optimizer = Sgd(model, hyper)
    rng = np.random.default_rng(hyper.seed)
    batches_per_epoch = math.ceil(len(dataset) / hyper.batch_size)
    warmup_iters = max(round(hyper.warmup_epochs * batches_per_epoch), hyper.min_warmup_iters)
    probe = dataset.batch([0])[0]
    iteration = 0

    epochs = tqdm(range(hyper.epochs), desc="train", disable=not progress)
    for epoch in epochs:
        model.train()
        start = time.perf_counter()
        order = rng.permutation(len(dataset))
        sums = {"box": 0.0, "obj": 0.0, "cls": 0.0, "total": 0.0}
        lr = bias_lr = momentum = 0.0
        for b in range(batches_per_epoch):
            images, gts = dataset.batch(order[b * hyper.batch_size : (b + 1) * hyper.batch_size])
            lr, bias_lr, momentum = schedule(iteration, epoch, warmup_iters, hyper)
            with metrics.timed("train.step"):
                result = compute_loss(model(images), gts, model.config, hyper)
                model.zero_grad()
                # batch mean times batch size, as YOLOv5 does
                backward(result.total * len(gts))
                optimizer.step(lr, bias_lr, momentum)
            metrics.increment("train.steps")
            for key, value in result.report.as_dict().items():
                sums[key] += value
            iteration += 1

        record = {
            "epoch": epoch,
            "loss": {key: value / batches_per_epoch for key, value in sums.items()},
            "lr": lr,
            "momentum": momentum,
            "seconds": time.perf_counter() - start,
        }
        last = epoch == hyper.epochs - 1
        if hyper.eval_every and ((epoch + 1) % hyper.eval_every == 0 or last):
            record["train_metrics"] = evaluate(model, dataset).summary()
            if eval_dataset is not None and len(eval_dataset):
                record["val_metrics"] = evaluate(model, eval_dataset).summary()
        record["attention"] = _attention_stats(model, probe)
        log.append(record)

        metrics.gauge("train.loss.total", record["loss"]["total"])
        metrics.gauge("train.lr", lr)
        metrics.timing("train.epoch_ms", record["seconds"] * 1000)
        epochs.set_postfix(loss=f"{record['loss']['total']:.4f}")
        logger.info(
            f"[train] epoch {epoch + 1}/{hyper.epochs} "
            f"loss {record['loss']['total']:.4f} (box {record['loss']['box']:.4f} "
            f"obj {record['loss']['obj']:.4f} cls {record['loss']['cls']:.4f}) lr {lr:.5f}"
        )
    model.eval()
    return log
