"""Detection metrics: greedy TP/FP matching, 101-point AP, mAP@0.5, mAP@0.5:0.95 and operating-point P/R.

Precision and recall are taken at one operating point (confidence `conf_threshold`, NMS `nms_threshold`,
IoU match `match_iou`); AP sweeps every detection down to the evaluation confidence floor.
"""

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.config import CONF_THRESHOLD
from src.config import EVAL_CONF_THRESHOLD
from src.config import MATCH_IOU_THRESHOLD
from src.config import MAX_DETECTIONS
from src.config import NMS_THRESHOLD
from src.config import worker_threads
from src.dataset import Dataset
from src.dataset import GroundTruth
from src.helpers import timed
from src.observability import get_logger
from src.observability import metrics
from src.postprocess import DetBox
from src.postprocess import iou_matrix
from src.postprocess import predict
from src.tensor import ContractError
from src.tensor import Tensor

logger = get_logger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# rounded so a recall of exactly k/100 lands on its own sample point
RECALL_POINTS = np.round(np.linspace(0.0, 1.0, 101), 12)
CSV_COLUMNS = (
    "precision",
    "recall",
    "map50",
    "map5095",
    "conf_threshold",
    "nms_threshold",
    "match_iou",
    "num_images",
)
TABLE_HEADER = "Precision (%) & Recall (%) & map@0.5 (%) & map@0.5:0.95 (%)"


def match_predictions(
    preds: list[DetBox], gts: list[GroundTruth], iou_threshold: float, image_size: int
) -> np.ndarray:
    """TP flag per prediction (given in confidence order).

    Each prediction takes the unused same-class gt with the highest IoU >= `iou_threshold`.
    """
    flags = np.zeros(len(preds), dtype=bool)
    if not preds or not gts:
        return flags
    gt_boxes = np.array([g.pixels(image_size) for g in gts])
    gt_classes = np.array([g.class_id for g in gts])
    overlaps = iou_matrix(np.array([p.xywh for p in preds]), gt_boxes)
    used = np.zeros(len(gts), dtype=bool)
    for i, pred in enumerate(preds):
        candidates = np.flatnonzero((gt_classes == pred.class_id) & ~used & (overlaps[i] >= iou_threshold))
        if candidates.size:
            best = candidates[np.argmax(overlaps[i, candidates])]
            used[best] = True
            flags[i] = True
    return flags


def average_precision(flags, num_gt: int) -> float:
    """Area under the interpolated precision-recall curve sampled at 101 recall points.

    NaN when there is neither a gt nor a prediction; 0 when predictions exist for a class with no gt.
    """
    flags = np.asarray(flags, dtype=bool)
    if num_gt == 0:
        return math.nan if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = np.round(tp / num_gt, 12)
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    index = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(index < len(envelope), envelope[np.minimum(index, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _nanmean(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    defined = values[~np.isnan(values)]
    return float(defined.mean()) if defined.size else 0.0


@dataclass(frozen=True)
class EvalReport:
    precision: float
    recall: float
    ap: dict[tuple[int, float], float]
    map50: float
    map5095: float
    ap50_per_class: tuple[float, ...]
    gt_per_class: tuple[int, ...]
    conf_threshold: float
    nms_threshold: float
    match_iou: float
    num_images: int
    num_predictions: int

    def summary(self) -> dict[str, float]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "map50": self.map50,
            "map5095": self.map5095,
        }

    def header(self) -> str:
        return (
            f"# precision/recall at conf {self.conf_threshold}, nms {self.nms_threshold}, "
            f"iou match {self.match_iou}; AP over all detections (101-point)"
        )

    def table_row(self) -> str:
        values = (self.precision, self.recall, self.map50, self.map5095)
        return " & ".join(f"{100 * v:.2f}" for v in values)

    def to_text(self) -> str:
        lines = [self.header()]
        lines += [f"{key} = {value}" for key, value in self.csv_values().items()]
        lines.append(f"num_predictions = {self.num_predictions}")
        for class_id, (ap50, n_gt) in enumerate(zip(self.ap50_per_class, self.gt_per_class)):
            lines.append(f"ap50_class_{class_id} = {ap50:.6f}  # {n_gt} gt")
        return "\n".join(lines) + "\n"

    def csv_values(self) -> dict[str, float | int]:
        return {
            "precision": round(self.precision, 6),
            "recall": round(self.recall, 6),
            "map50": round(self.map50, 6),
            "map5095": round(self.map5095, 6),
            "conf_threshold": self.conf_threshold,
            "nms_threshold": self.nms_threshold,
            "match_iou": self.match_iou,
            "num_images": self.num_images,
        }

    def to_csv(self, include_header: bool = True) -> str:
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=CSV_COLUMNS, lineterminator="\n")
        if include_header:
            writer.writeheader()
        writer.writerow(self.csv_values())
        return buffer.getvalue()

    def write_csv(self, path: str | Path) -> Path:
        """Write or append one row; the header is written only for a new file."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        new = not path.exists() or path.stat().st_size == 0
        with path.open("a") as f:
            f.write(self.to_csv(include_header=new))
        return path


def evaluate_detections(
    detections: list[list[DetBox]],
    labels: list[list[GroundTruth]],
    image_size: int,
    num_classes: int,
    conf_threshold: float = CONF_THRESHOLD,
    nms_threshold: float = NMS_THRESHOLD,
    match_iou: float = MATCH_IOU_THRESHOLD,
) -> EvalReport:
    """Score per-image detections (already NMS-filtered) against ground truth."""
    if len(detections) != len(labels):
        raise ContractError(f"{len(detections)} detection lists for {len(labels)} images")
    if not labels:
        raise ContractError("cannot evaluate an empty dataset")

    rows = []  # (confidence, image, rank, class, flags per IoU threshold)
    tp_at_op = n_pred_at_op = 0
    for image_index, (preds, gts) in enumerate(zip(detections, labels)):
        preds = sorted(preds, key=lambda d: -d.confidence)
        flags = np.stack([match_predictions(preds, gts, t, image_size) for t in IOU_THRESHOLDS], axis=1)
        for rank, pred in enumerate(preds):
            rows.append((pred.confidence, image_index, rank, pred.class_id, flags[rank]))
        operating = [p for p in preds if p.confidence >= conf_threshold]
        tp_at_op += int(match_predictions(operating, gts, match_iou, image_size).sum())
        n_pred_at_op += len(operating)

    gt_per_class = np.zeros(num_classes, dtype=np.int64)
    for gts in labels:
        for g in gts:
            if g.class_id < num_classes:
                gt_per_class[g.class_id] += 1

    ap: dict[tuple[int, float], float] = {}
    if rows:
        conf = np.array([r[0] for r in rows])
        order = np.lexsort((np.array([r[2] for r in rows]), np.array([r[1] for r in rows]), -conf))
        classes = np.array([r[3] for r in rows])[order]
        flag_table = np.stack([r[4] for r in rows])[order]
    else:
        classes = np.zeros(0, dtype=np.int64)
        flag_table = np.zeros((0, len(IOU_THRESHOLDS)), dtype=bool)
    for class_id in range(num_classes):
        selected = flag_table[classes == class_id]
        for t_index, threshold in enumerate(IOU_THRESHOLDS):
            ap[(class_id, threshold)] = average_precision(selected[:, t_index], int(gt_per_class[class_id]))

    ap50 = tuple(ap[(c, 0.5)] for c in range(num_classes))
    per_class_5095 = [
        math.nan if math.isnan(ap[(c, 0.5)]) else float(np.mean([ap[(c, t)] for t in IOU_THRESHOLDS]))
        for c in range(num_classes)
    ]
    total_gt = int(gt_per_class.sum())
    return EvalReport(
        precision=tp_at_op / n_pred_at_op if n_pred_at_op else 0.0,
        recall=tp_at_op / total_gt if total_gt else 0.0,
        ap=ap,
        map50=_nanmean(ap50),
        map5095=_nanmean(per_class_5095),
        ap50_per_class=ap50,
        gt_per_class=tuple(int(n) for n in gt_per_class),
        conf_threshold=conf_threshold,
        nms_threshold=nms_threshold,
        match_iou=match_iou,
        num_images=len(labels),
        num_predictions=len(rows),
    )


@timed
def evaluate(
    model,
    dataset: Dataset,
    conf_threshold: float = CONF_THRESHOLD,
    nms_threshold: float = NMS_THRESHOLD,
    workers: int | None = None,
) -> EvalReport:
    """Forward, decode and NMS per image at the evaluation confidence floor, then score.

    Images are processed one at a time (in parallel when `workers` > 1) and merged by index, so
    the report does not depend on the worker count.
    """
    if len(dataset) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    workers = workers or worker_threads()
    was_training = model.training
    model.eval()

    def detect_one(index: int) -> list[DetBox]:
        images = Tensor(dataset.images[index][None])
        return predict(model, images, EVAL_CONF_THRESHOLD, nms_threshold, MAX_DETECTIONS)[0]

    try:
        with metrics.timed("eval.detect"):
            if workers == 1:
                detections = [detect_one(i) for i in range(len(dataset))]
            else:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    detections = list(pool.map(detect_one, range(len(dataset))))
    finally:
        model.train(was_training)

    report = evaluate_detections(
        detections,
        dataset.labels,
        dataset.image_size,
        model.config.num_classes,
        conf_threshold=conf_threshold,
        nms_threshold=nms_threshold,
    )
    metrics.gauge("eval.map50", report.map50)
    metrics.gauge("eval.map5095", report.map5095)
    logger.info(f"[evaluate] {len(dataset)} images: {TABLE_HEADER} = {report.table_row()}")
    return report
