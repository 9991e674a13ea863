"""Tests for TP/FP matching, average precision and the evaluation report."""

import math

import numpy as np
import pytest

from src.dataset import CLASS_NAMES
from src.dataset import Dataset
from src.dataset import GroundTruth
from src.dataset import load_dataset
from src.evaluation import CSV_COLUMNS
from src.evaluation import EvalReport
from src.evaluation import average_precision
from src.evaluation import evaluate
from src.evaluation import evaluate_detections
from src.evaluation import match_predictions
from src.postprocess import DetBox
from src.tensor import ContractError

SIZE = 100


def _det(cx, cy, w, h, confidence, class_id=0, num_classes=3):
    scores = [0.0] * num_classes
    scores[class_id] = 1.0
    return DetBox.from_scores(cx, cy, w, h, confidence, tuple(scores))


def _from_gt(gt: GroundTruth, confidence: float) -> DetBox:
    return _det(*gt.pixels(SIZE), confidence, gt.class_id)


def _all_point_ap(flags, num_gt):
    tp = np.cumsum(flags)
    recall = tp / num_gt
    precision = tp / np.arange(1, len(flags) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(np.diff(np.concatenate([[0.0], recall])) * envelope))


def _corner_iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    inter = max(0.0, min(ax1, bx1) - max(ax0, bx0)) * max(0.0, min(ay1, by1) - max(ay0, by0))
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def _reference_map50(detections, labels, num_classes):
    """Independent per-class AP@0.5 with plain loops: greedy matching, then 101 recall samples."""
    aps = []
    for c in range(num_classes):
        num_gt = sum(g.class_id == c for gts in labels for g in gts)
        scored = []
        for preds, gts in zip(detections, labels):
            used = [False] * len(gts)
            for pred in sorted(preds, key=lambda d: -d.confidence):
                best, best_iou = None, 0.5
                for j, g in enumerate(gts):
                    if g.class_id != pred.class_id or used[j]:
                        continue
                    overlap = _corner_iou(pred.xywh, g.pixels(SIZE))
                    if overlap >= best_iou:
                        best, best_iou = j, overlap
                if best is not None:
                    used[best] = True
                if pred.class_id == c:
                    scored.append((pred.confidence, best is not None))
        if num_gt == 0:
            if scored:
                aps.append(0.0)
            continue
        scored.sort(key=lambda item: -item[0])
        tp = fp = 0
        points = []
        for _, hit in scored:
            tp, fp = tp + hit, fp + (not hit)
            points.append((tp / num_gt, tp / (tp + fp)))
        samples = []
        for k in range(101):
            reachable = [p for r, p in points if r >= k / 100 - 1e-12]
            samples.append(max(reachable) if reachable else 0.0)
        aps.append(sum(samples) / 101)
    return sum(aps) / len(aps)


def _scripted_scene(rng):
    labels, detections = [], []
    for _ in range(10):
        gts = [
            GroundTruth(int(rng.integers(3)), *rng.uniform(0.2, 0.8, size=2), *rng.uniform(0.08, 0.3, size=2))
            for _ in range(int(rng.integers(1, 4)))
        ]
        preds = []
        for g in gts:
            if rng.random() < 0.8:
                cx, cy, w, h = g.pixels(SIZE)
                box = np.array([cx, cy, w, h]) + rng.normal(scale=2.0, size=4)
                preds.append(_det(*box, rng.uniform(0.2, 1.0), g.class_id))
        for _ in range(int(rng.integers(0, 3))):
            box = np.concatenate([rng.uniform(10, 90, size=2), rng.uniform(5, 30, size=2)])
            preds.append(_det(*box, rng.uniform(0.001, 0.9), int(rng.integers(3))))
        labels.append(gts)
        detections.append(preds)
    return detections, labels


def test_prediction_on_its_gt_is_a_true_positive():
    gt = GroundTruth(1, 0.5, 0.5, 0.2, 0.3)

    assert match_predictions([_from_gt(gt, 0.9)], [gt], 0.5, SIZE).tolist() == [True]


def test_second_prediction_on_a_used_gt_is_a_false_positive():
    gt = GroundTruth(0, 0.5, 0.5, 0.2, 0.3)
    preds = [_from_gt(gt, 0.9), _det(50.5, 50.0, 20.0, 30.0, 0.8)]

    assert match_predictions(preds, [gt], 0.5, SIZE).tolist() == [True, False]


def test_matching_respects_class_and_threshold():
    gt = GroundTruth(0, 0.5, 0.5, 0.2, 0.2)

    wrong_class = _det(50.0, 50.0, 20.0, 20.0, 0.9, class_id=2)

    assert match_predictions([wrong_class], [gt], 0.5, SIZE).tolist() == [False]
    assert match_predictions([_det(60.0, 50.0, 20.0, 20.0, 0.9)], [gt], 0.5, SIZE).tolist() == [False]
    assert match_predictions([_det(60.0, 50.0, 20.0, 20.0, 0.9)], [gt], 0.3, SIZE).tolist() == [True]


def test_matching_takes_the_highest_iou_unused_gt():
    near = GroundTruth(0, 0.5, 0.5, 0.2, 0.2)
    far = GroundTruth(0, 0.56, 0.5, 0.2, 0.2)
    preds = [_det(51.0, 50.0, 20.0, 20.0, 0.9), _det(56.0, 50.0, 20.0, 20.0, 0.8)]

    assert match_predictions(preds, [far, near], 0.5, SIZE).tolist() == [True, True]


@pytest.mark.parametrize(
    "flags,num_gt,expected",
    [
        ([True], 1, 1.0),
        ([False, False], 2, 0.0),
        ([], 3, 0.0),
        ([False], 0, 0.0),
    ],
)
def test_average_precision_examples(flags, num_gt, expected):
    assert average_precision(flags, num_gt) == expected


def test_average_precision_is_undefined_without_gt_or_predictions():
    assert math.isnan(average_precision([], 0))


def test_worked_example_is_close_to_the_exact_area():
    value = average_precision([True, False, True], 2)

    assert value == pytest.approx((51 + 50 * 2 / 3) / 101)
    assert abs(value - (0.5 + 0.5 * 2 / 3)) < 0.01


def test_101_point_ap_stays_within_one_percent_of_the_exact_area(rng):
    for _ in range(500):
        flags = rng.random(int(rng.integers(1, 21))) < 0.5
        num_gt = int(flags.sum()) + int(rng.integers(0, 4))
        if num_gt == 0:
            continue

        assert abs(average_precision(flags, num_gt) - _all_point_ap(flags, num_gt)) <= 0.01 + 1e-9


def test_trailing_false_positive_never_raises_ap(rng):
    for _ in range(200):
        flags = list(rng.random(int(rng.integers(1, 15))) < 0.6)
        num_gt = sum(flags) + 1

        assert average_precision(flags + [False], num_gt) <= average_precision(flags, num_gt)


def test_perfect_detections_score_one():
    labels = [
        [GroundTruth(0, 0.3, 0.3, 0.2, 0.2), GroundTruth(2, 0.7, 0.6, 0.1, 0.3)],
        [GroundTruth(2, 0.5, 0.5, 0.4, 0.4)],
    ]
    detections = [[_from_gt(g, 0.9) for g in gts] for gts in labels]

    report = evaluate_detections(detections, labels, SIZE, num_classes=3)

    assert (report.precision, report.recall, report.map50, report.map5095) == (1.0, 1.0, 1.0, 1.0)
    assert math.isnan(report.ap50_per_class[1])
    assert report.gt_per_class == (1, 0, 2)


def test_no_detections_give_zero_recall():
    report = evaluate_detections([[]], [[GroundTruth(0, 0.5, 0.5, 0.2, 0.2)]], SIZE, num_classes=1)

    assert report.recall == 0.0
    assert report.precision == 0.0
    assert report.map50 == 0.0


def test_operating_point_ignores_low_confidence_detections():
    gt = GroundTruth(0, 0.5, 0.5, 0.2, 0.2)
    detections = [[_from_gt(gt, 0.1), _det(20.0, 20.0, 10.0, 10.0, 0.6)]]

    report = evaluate_detections(detections, [[gt]], SIZE, num_classes=1, conf_threshold=0.25)

    assert report.precision == 0.0
    assert report.recall == 0.0
    assert report.map50 == pytest.approx(51 / 101 * 0.5 + 50 / 101 * 0.5)


def test_scripted_scene_matches_a_loop_reference(rng):
    detections, labels = _scripted_scene(rng)

    report = evaluate_detections(detections, labels, SIZE, num_classes=3)

    assert report.map50 == pytest.approx(_reference_map50(detections, labels, 3), abs=1e-12)
    assert 0.0 <= report.map5095 <= 1.0
    assert report.num_images == 10
    assert report.num_predictions == sum(len(d) for d in detections)


def test_evaluate_detections_contract_errors():
    with pytest.raises(ContractError):
        evaluate_detections([], [], SIZE, 1)
    with pytest.raises(ContractError):
        evaluate_detections([[]], [[], []], SIZE, 1)


def _report(**changes):
    values = dict(
        precision=0.5,
        recall=0.25,
        ap={},
        map50=0.75,
        map5095=0.4,
        ap50_per_class=(0.75,),
        gt_per_class=(4,),
        conf_threshold=0.25,
        nms_threshold=0.45,
        match_iou=0.5,
        num_images=10,
        num_predictions=12,
    )
    values.update(changes)
    return EvalReport(**values)


def test_csv_schema_is_stable():
    assert _report().to_csv() == (
        "precision,recall,map50,map5095,conf_threshold,nms_threshold,match_iou,num_images\n"
        "0.5,0.25,0.75,0.4,0.25,0.45,0.5,10\n"
    )
    assert list(_report().csv_values()) == list(CSV_COLUMNS)


def test_write_csv_appends_rows_under_one_header(tmp_path):
    path = tmp_path / "eval" / "results.csv"

    _report().write_csv(path)
    _report(map50=0.8).write_csv(path)

    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 3
    assert lines[2].split(",")[2] == "0.8"


def test_text_report_and_table_row():
    report = _report()

    assert report.table_row() == "50.00 & 25.00 & 75.00 & 40.00"
    text = report.to_text()
    assert text.startswith("# precision/recall at conf 0.25, nms 0.45, iou match 0.5")
    assert "map50 = 0.75\n" in text
    assert "ap50_class_0 = 0.750000  # 4 gt\n" in text


def test_evaluate_is_independent_of_worker_count(small_model, synthetic_dir):
    dataset = load_dataset(synthetic_dir)

    serial = evaluate(small_model, dataset, workers=1)
    parallel = evaluate(small_model, dataset, workers=4)

    assert serial.summary() == parallel.summary()
    assert serial.num_predictions == parallel.num_predictions
    assert small_model.training


def test_evaluate_rejects_an_empty_dataset(small_model):
    with pytest.raises(ContractError):
        evaluate(small_model, Dataset([], [], [], list(CLASS_NAMES)))
