"""Tests for the variant comparisons, plus the long training properties they measure."""

from types import SimpleNamespace

import pytest

from src.ablation import FSA_PAIR
from src.ablation import TINY_HEAD_PAIR
from src.ablation import VariantRun
from src.ablation import run_variant
from src.ablation import wins
from src.ablation import worst_gap
from src.dataset import SceneSpec
from src.dataset import generate
from src.dataset import load_dataset
from src.hyper import Hyper
from src.model import VARIANTS

SEEDS = (0, 1, 2)


def _run(variant, seed, **map50):
    reports = {split: SimpleNamespace(map50=value) for split, value in map50.items()}
    return VariantRun(variant, seed, parameters=0, reports=reports)


def test_wins_counts_strict_improvements_per_seed():
    runs = [
        _run("fsa-yolo", 0, val=0.8),
        _run("tiny-head+mhsa", 0, val=0.7),
        _run("fsa-yolo", 1, val=0.6),
        _run("tiny-head+mhsa", 1, val=0.6),
        _run("fsa-yolo", 2, val=0.9),
        _run("tiny-head+mhsa", 2, val=0.5),
    ]

    assert wins(runs, FSA_PAIR, "val") == 2
    assert worst_gap(runs, FSA_PAIR, "val") == pytest.approx(0.0)


def test_run_variant_trains_and_scores_every_split(tmp_path, small_config, synthetic_dir):
    dataset = load_dataset(synthetic_dir)
    hyper = Hyper(epochs=1, batch_size=2, eval_every=0, autoanchor=False)
    validation = {"val": dataset.subset([0, 1])}

    run = run_variant("baseline", dataset, hyper, validation, tmp_path, base=small_config)

    assert run.variant == "baseline"
    assert set(run.reports) == {"train", "val"}
    assert run.reports["val"].num_images == 2
    assert run.attention == {}
    assert len((tmp_path / "baseline_seed0.jsonl").read_text().splitlines()) == 1


@pytest.fixture(scope="module")
def splits(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    return {
        "train": load_dataset(generate(SceneSpec(seed=0), 32, root / "train")),
        "val": load_dataset(generate(SceneSpec(seed=1), 32, root / "val")),
        "tiny": load_dataset(generate(SceneSpec(seed=2, tiny_only=True), 32, root / "tiny")),
    }


@pytest.fixture(scope="module")
def trained(splits):
    cache = {}

    def get(variant, seed):
        if (variant, seed) not in cache:
            hyper = Hyper(epochs=300, seed=seed, eval_every=0)
            eval_sets = {"val": splits["val"], "tiny": splits["tiny"]}
            cache[(variant, seed)] = run_variant(variant, splits["train"], hyper, eval_sets)
        return cache[(variant, seed)]

    return get


@pytest.mark.slow
def test_thirty_two_scenes_overfit_past_ninety_percent_map50(trained):
    run = trained("fsa-yolo", 0)

    assert run.map50("train") >= 0.9
    assert set(run.attention) == {"p2", "p3", "p4", "p5"}
    assert all(stats["std"] > 1e-3 for stats in run.attention.values())


@pytest.mark.slow
def test_fsa_keeps_train_map_and_wins_validation_on_most_seeds(trained):
    runs = [trained(variant, seed) for variant in FSA_PAIR for seed in SEEDS]

    assert worst_gap(runs, FSA_PAIR, "train") >= -0.02
    assert wins(runs, FSA_PAIR, "val") >= 2


@pytest.mark.slow
def test_stride_four_head_wins_on_tiny_devices_on_most_seeds(trained):
    assert set(TINY_HEAD_PAIR) <= set(VARIANTS)
    runs = [trained(variant, seed) for variant in TINY_HEAD_PAIR for seed in SEEDS]

    assert wins(runs, TINY_HEAD_PAIR, "tiny") >= 2
