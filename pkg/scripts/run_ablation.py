#!/usr/bin/env python3
"""
Train every ablation variant under each seed and print the comparison tables.
Each variant adds one component: the stride-4 head, the self-attention stage, then FSA.

    uv run python -m scripts.run_ablation --train data/synth/train --val data/synth/val \
        --tiny data/synth/tiny --seed 0 --seed 1 --seed 2
"""

from pathlib import Path

import typer

from src.ablation import FSA_PAIR
from src.ablation import TINY_HEAD_PAIR
from src.ablation import run_variant
from src.ablation import wins
from src.ablation import worst_gap
from src.dataset import load_dataset
from src.evaluation import TABLE_HEADER
from src.hyper import Hyper
from src.model import VARIANTS


def main(
    train_dir: Path = typer.Option(..., "--train", help="Training dataset directory"),
    val_dir: Path = typer.Option(..., "--val", help="Held-out dataset directory"),
    tiny_dir: Path | None = typer.Option(None, "--tiny", help="Tiny-device-only split (gen --tiny-only)"),
    epochs: int = typer.Option(300, "--epochs", min=1),
    seeds: list[int] = typer.Option([0, 1, 2], "--seed", help="Repeat for several seeds"),
    out: Path = typer.Option(Path("runs/ablation"), "--out", help="Directory for per-run logs and CSV"),
) -> None:
    train_set = load_dataset(train_dir)
    eval_sets = {"val": load_dataset(val_dir)}
    if tiny_dir is not None:
        eval_sets["tiny"] = load_dataset(tiny_dir)
    out.mkdir(parents=True, exist_ok=True)

    runs = []
    for seed in seeds:
        hyper = Hyper(epochs=epochs, seed=seed, eval_every=0)
        for name in VARIANTS:
            run = run_variant(name, train_set, hyper, eval_sets, log_dir=out)
            for split, report in run.reports.items():
                report.write_csv(out / f"{name}_{split}.csv")
            runs.append(run)

    width = max(len(name) for name in VARIANTS)
    for split in ("train", *eval_sets):
        print(f"\n# {split}")
        print(f"{'variant':{width}} & seed & params & {TABLE_HEADER}")
        for run in runs:
            print(f"{run.variant:{width}} & {run.seed} & {run.parameters} & {run.reports[split].table_row()}")

    print(f"\nFSA beats no-FSA on val: {wins(runs, FSA_PAIR, 'val')}/{len(seeds)} seeds")
    print(f"FSA worst train map50 gap: {worst_gap(runs, FSA_PAIR, 'train'):+.4f}")
    if "tiny" in eval_sets:
        print(f"stride-4 head beats 3 heads on tiny: {wins(runs, TINY_HEAD_PAIR, 'tiny')}/{len(seeds)} seeds")


if __name__ == "__main__":
    typer.run(main)
