"""Tests for the synthetic scene generator and the dataset reader."""

import re
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from src.dataset import CLASS_NAMES
from src.dataset import DatasetError
from src.dataset import GroundTruth
from src.dataset import SceneSpec
from src.dataset import generate
from src.dataset import kmeans_anchors
from src.dataset import load_dataset
from src.dataset import parse_labels
from src.dataset import parse_scene_spec
from src.dataset import render_scene

PLAIN = SceneSpec(
    image_size=96,
    min_devices=1,
    max_devices=1,
    tiny_fraction=0.0,
    clutter_density=0.0,
    lighting_jitter=0.0,
    noise=0.0,
)


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_render_is_a_pure_function_of_spec_and_index(small_scene):
    first_pixels, first_labels = render_scene(small_scene, 7)
    second_pixels, second_labels = render_scene(small_scene, 7)

    np.testing.assert_array_equal(first_pixels, second_pixels)
    assert first_labels == second_labels
    assert first_pixels.shape == (64, 64, 3)
    assert first_pixels.dtype == np.uint8
    assert not np.array_equal(first_pixels, render_scene(small_scene, 8)[0])


def test_generate_writes_identical_files_regardless_of_worker_count(tmp_path, small_scene):
    serial = generate(small_scene, 5, tmp_path / "a", workers=1)
    parallel = generate(small_scene, 5, tmp_path / "b", workers=3)

    assert _files(serial) == _files(parallel)
    assert (serial / "classes.txt").read_text() == "".join(f"{name}\n" for name in CLASS_NAMES)
    assert len(list((serial / "images").glob("*.ppm"))) == 5


def test_single_device_scenes_have_one_label_line(tmp_path):
    root = generate(replace(PLAIN, image_size=64), 6, tmp_path / "one", workers=1)

    for label_file in (root / "labels").glob("*.txt"):
        assert len(label_file.read_text().splitlines()) == 1


def test_label_box_matches_the_drawn_device():
    for index in range(12):
        pixels, (gt,) = render_scene(PLAIN, index)
        colors, counts = np.unique(pixels.reshape(-1, 3), axis=0, return_counts=True)
        background = colors[np.argmax(counts)]
        ys, xs = np.nonzero(np.any(pixels != background, axis=2))
        cx, cy, w, h = gt.pixels(PLAIN.image_size)

        assert abs(xs.min() - (cx - w / 2)) <= 2
        assert abs(xs.max() - (cx + w / 2 - 1)) <= 2
        assert abs(ys.min() - (cy - h / 2)) <= 2
        assert abs(ys.max() - (cy + h / 2 - 1)) <= 2


def test_classes_are_roughly_balanced():
    spec = SceneSpec(seed=11)
    counts = Counter(gt.class_id for index in range(300) for gt in render_scene(spec, index)[1])

    expected = sum(counts.values()) / 3
    assert set(counts) == {0, 1, 2}
    assert all(abs(count - expected) <= 0.2 * expected for count in counts.values())


def test_default_scenes_include_a_tiny_tier():
    spec = SceneSpec(seed=5)
    heights = [gt.h * spec.image_size for index in range(200) for gt in render_scene(spec, index)[1]]

    assert sum(h < 12 for h in heights) >= 0.2 * len(heights)


def test_tiny_only_scenes_draw_only_tiny_devices():
    spec = SceneSpec(tiny_only=True, seed=2)

    for index in range(20):
        for gt in render_scene(spec, index)[1]:
            assert gt.h * spec.image_size < round(spec.tiny_scale[1] * spec.image_size) + 0.01


def test_generated_labels_survive_the_round_trip_through_disk(tmp_path, small_scene):
    root = generate(small_scene, 4, tmp_path / "synth", workers=2)

    dataset = load_dataset(root)

    assert dataset.stems == ["00000", "00001", "00002", "00003"]
    assert dataset.image_size == 64
    assert dataset.class_names == list(CLASS_NAMES)
    for index in range(4):
        pixels, labels = render_scene(small_scene, index)
        assert dataset.labels[index] == labels
        np.testing.assert_array_equal(np.rint(dataset.images[index] * 255).transpose(1, 2, 0), pixels)


def test_parse_labels_reads_normalized_lines(tmp_path):
    path = tmp_path / "00000.txt"
    path.write_text("0 0.5 0.5 0.25 0.25\n\n2 0.1 0.9 0.05 0.1\n")

    labels = parse_labels(path, num_classes=3)

    assert labels == [GroundTruth(0, 0.5, 0.5, 0.25, 0.25), GroundTruth(2, 0.1, 0.9, 0.05, 0.1)]
    assert labels[0].pixels(64) == (32.0, 32.0, 16.0, 16.0)
    assert labels[0].to_line() == "0 0.500000 0.500000 0.250000 0.250000"


@pytest.mark.parametrize(
    "line",
    [
        "0 0.5 0.5 0.25",
        "0 0.5 0.5 0.25 nope",
        "3 0.5 0.5 0.25 0.25",
        "0 0.5 0.5 0.0 0.25",
        "0 1.5 0.5 0.25 0.25",
    ],
)
def test_malformed_label_lines_name_the_file_and_line(tmp_path, line):
    path = tmp_path / "00000.txt"
    path.write_text(f"1 0.5 0.5 0.2 0.2\n{line}\n")

    with pytest.raises(DatasetError, match=re.escape(f"{path}:2")):
        parse_labels(path, num_classes=3)


def test_load_dataset_of_an_empty_directory_is_empty(tmp_path):
    dataset = load_dataset(tmp_path)

    assert len(dataset) == 0
    assert dataset.image_size is None
    assert dataset.num_classes == 3


def test_load_dataset_rejects_a_missing_directory(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        load_dataset(tmp_path / "absent")


def test_load_dataset_rejects_mixed_image_sizes(tmp_path, small_scene):
    generate(small_scene, 2, tmp_path, workers=1)
    generate(replace(small_scene, image_size=32), 3, tmp_path / "other", workers=1)
    (tmp_path / "other" / "images" / "00002.ppm").rename(tmp_path / "images" / "00002.ppm")

    with pytest.raises(DatasetError, match="square size"):
        load_dataset(tmp_path)


def test_unreadable_image_is_a_dataset_error(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "images" / "00000.ppm").write_bytes(b"not an image")

    with pytest.raises(DatasetError, match="cannot read image"):
        load_dataset(tmp_path)


def test_batch_and_subset(synthetic_dir):
    dataset = load_dataset(synthetic_dir)

    images, labels = dataset.batch([2, 0])

    assert images.shape == (2, 3, 64, 64)
    assert images.data.min() >= 0.0 and images.data.max() <= 1.0
    assert labels == [dataset.labels[2], dataset.labels[0]]
    subset = dataset.subset([3, 1])
    assert subset.stems == ["00003", "00001"]
    assert len(subset) == 2
    assert subset.class_names == dataset.class_names


def test_parse_scene_spec_overrides_defaults():
    text = """
    # tiny devices only, cluttered
    image_size = 96
    device_scale = 0.1, 0.2
    tiny_only = true
    clutter_density = 2
    """

    spec = parse_scene_spec(text)

    assert spec.image_size == 96
    assert spec.device_scale == (0.1, 0.2)
    assert spec.tiny_only is True
    assert spec.clutter_density == 2.0
    assert spec.seed == SceneSpec().seed


@pytest.mark.parametrize(
    "text,message",
    [
        ("colour = red", "scene.cfg:1: unknown or malformed"),
        ("image_size 96", "scene.cfg:1: unknown or malformed"),
        ("seed = 1\nnoise = loud", "scene.cfg:2: bad value for noise"),
        ("image_size = 8", "image_size must be >= 16"),
        ("num_classes = 4", "num_classes"),
        ("min_devices = 3\nmax_devices = 2", "device count range"),
        ("tiny_scale = 0.06, 0.02", "tiny_scale"),
        ("tiny_fraction = 1.5", "tiny_fraction"),
        ("noise = -1", "non-negative"),
    ],
)
def test_invalid_scene_specs_are_rejected(text, message):
    with pytest.raises(DatasetError, match=message):
        parse_scene_spec(text, source="scene.cfg")


def test_fewer_scene_classes_limit_the_class_file(tmp_path):
    root = generate(replace(SceneSpec(image_size=32), num_classes=1), 3, tmp_path, workers=1)

    assert (root / "classes.txt").read_text() == "smart_speaker\n"
    assert {gt.class_id for labels in load_dataset(root).labels for gt in labels} == {0}


def test_kmeans_anchors_needs_enough_boxes():
    labels = [[GroundTruth(0, 0.5, 0.5, 0.1, 0.1)] for _ in range(5)]

    assert kmeans_anchors(labels, 160, n=6) is None


def test_kmeans_anchors_are_sorted_by_area(rng):
    labels = [[GroundTruth(0, 0.5, 0.5, *rng.uniform(0.02, 0.4, size=2))] for _ in range(60)]

    anchors = kmeans_anchors(labels, 160, n=6, seed=1)

    assert len(anchors) == 6
    areas = [w * h for w, h in anchors]
    assert areas == sorted(areas)
    assert all(w == round(w, 2) and 0 < w <= 64 for w, _ in anchors)
    assert kmeans_anchors(labels, 160, n=6, seed=1) == anchors
