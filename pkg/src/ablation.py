"""Variant comparisons under shared seeds: FSA on/off, and the stride-4 head on a tiny-device split."""

from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

from src.dataset import Dataset
from src.evaluation import EvalReport
from src.evaluation import evaluate
from src.hyper import Hyper
from src.model import build
from src.model import count_parameters
from src.model import variant_config
from src.model_config import ModelConfig
from src.observability import get_logger
from src.observability import metrics
from src.train import fit_anchors
from src.train import train

logger = get_logger(__name__)

# (candidate, reference) variant pairs
FSA_PAIR = ("fsa-yolo", "tiny-head+mhsa")
TINY_HEAD_PAIR = ("tiny-head", "baseline")


@dataclass(frozen=True)
class VariantRun:
    variant: str
    seed: int
    parameters: int
    reports: dict[str, EvalReport]
    attention: dict[str, dict[str, float]] = field(default_factory=dict)

    def map50(self, split: str) -> float:
        return self.reports[split].map50


def run_variant(
    name: str,
    train_set: Dataset,
    hyper: Hyper,
    eval_sets: dict[str, Dataset] | None = None,
    log_dir: Path | None = None,
    base: ModelConfig | None = None,
) -> VariantRun:
    """Train one variant from scratch and evaluate it on its own training set plus `eval_sets`."""
    config = variant_config(name, base)
    if hyper.autoanchor:
        config = fit_anchors(config, train_set, hyper.seed)
    model = build(config, hyper.seed)
    log_path = log_dir / f"{name}_seed{hyper.seed}.jsonl" if log_dir else None
    log = train(model, train_set, hyper, log_path=log_path)
    reports = {"train": evaluate(model, train_set)}
    for split, dataset in (eval_sets or {}).items():
        reports[split] = evaluate(model, dataset)
    run = VariantRun(name, hyper.seed, count_parameters(config), reports, log.records[-1]["attention"])
    logger.info(
        f"[ablation] {name} seed {hyper.seed}: "
        + ", ".join(f"{split} map50 {report.map50:.4f}" for split, report in reports.items())
    )
    metrics.gauge(f"ablation.{name}.map50", reports["train"].map50)
    return run


def wins(runs: list[VariantRun], pair: tuple[str, str], split: str) -> int:
    """Seeds on which the first variant of `pair` scores a strictly higher mAP@0.5 on `split`."""
    by_key = {(r.variant, r.seed): r for r in runs}
    candidate, reference = pair
    seeds = sorted({r.seed for r in runs if r.variant == candidate})
    return sum(by_key[(candidate, s)].map50(split) > by_key[(reference, s)].map50(split) for s in seeds)


def worst_gap(runs: list[VariantRun], pair: tuple[str, str], split: str) -> float:
    """Smallest candidate-minus-reference mAP@0.5 over the shared seeds."""
    by_key = {(r.variant, r.seed): r for r in runs}
    candidate, reference = pair
    seeds = sorted({r.seed for r in runs if r.variant == candidate})
    return min(by_key[(candidate, s)].map50(split) - by_key[(reference, s)].map50(split) for s in seeds)
