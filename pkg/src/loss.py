"""YOLOv5 target assignment and loss: CIoU box term, objectness BCE with per-head balance, class BCE."""

import math
from dataclasses import dataclass
from dataclasses import field

import numpy as np

from src.dataset import GroundTruth
from src.hyper import OBJ_BALANCE
from src.hyper import Hyper
from src.model_config import ModelConfig
from src.tensor import ShapeError
from src.tensor import Tensor
from src.tensor import atan
from src.tensor import bce_with_logits
from src.tensor import clamp_min
from src.tensor import getitem
from src.tensor import maximum
from src.tensor import mean_all
from src.tensor import minimum
from src.tensor import sigmoid

CIOU_EPS = 1e-7

# Neighbor offsets in grid cells: center, left, up, right, down.
_OFFSETS = np.array([[0, 0], [1, 0], [0, 1], [-1, 0], [0, -1]], dtype=np.float64)


@dataclass(frozen=True)
class HeadTargets:
    """Matches for one head, one row per (gt, anchor, cell) triple."""

    image: np.ndarray  # (M,) image index in batch
    anchor: np.ndarray  # (M,) anchor index within the head
    gx: np.ndarray  # (M,) cell column
    gy: np.ndarray  # (M,) cell row
    gt: np.ndarray  # (M,) index into the flattened batch ground truth
    box: np.ndarray  # (M, 4) target (x offset from cell, y offset, w, h) in grid units
    class_id: np.ndarray  # (M,)
    anchor_wh: np.ndarray  # (M, 2) matched anchor in grid units

    def __len__(self) -> int:
        return int(self.image.shape[0])


@dataclass(frozen=True)
class TargetAssignment:
    heads: list[HeadTargets]

    def total(self) -> int:
        return sum(len(h) for h in self.heads)


@dataclass(frozen=True)
class LossReport:
    box: float
    obj: float
    cls: float
    total: float
    num_targets: int

    def as_dict(self) -> dict[str, float]:
        return {"box": self.box, "obj": self.obj, "cls": self.cls, "total": self.total}


@dataclass
class LossResult:
    total: Tensor
    report: LossReport
    # Per-head (alpha, objectness target) held constant under differentiation.
    detached: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def _flatten(gts: list[list[GroundTruth]]) -> np.ndarray:
    rows = [(b, g.class_id, g.cx, g.cy, g.w, g.h) for b, image_gts in enumerate(gts) for g in image_gts]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 6)


def assign_targets(
    gts: list[list[GroundTruth]], config: ModelConfig, hyper: Hyper | None = None
) -> TargetAssignment:
    """Match every ground-truth box to (head, anchor, cell) triples.

    An anchor matches when the larger of the w and h ratios (either direction) is below the ratio
    threshold. The gt's own cell always matches; the two adjacent cells nearest the gt center along
    x and y match too when the center lies strictly closer than `neighbor_offset` to that border.
    """
    hyper = hyper or Hyper()
    table = _flatten(gts)
    heads = []
    g = hyper.neighbor_offset
    for stride, anchors in zip(config.strides, config.anchors):
        grid = config.input_size // stride
        anchor_grid = np.asarray(anchors, dtype=np.float64) / stride
        rows: list[tuple] = []
        for gt_index, (b, class_id, cx, cy, w, h) in enumerate(table):
            gxy = np.array([cx, cy]) * grid
            gwh = np.array([w, h]) * grid
            gxy_inverse = grid - gxy
            frac, frac_inverse = gxy % 1, gxy_inverse % 1
            allowed = [
                True,
                frac[0] < g and gxy[0] > 1,
                frac[1] < g and gxy[1] > 1,
                frac_inverse[0] < g and gxy_inverse[0] > 1,
                frac_inverse[1] < g and gxy_inverse[1] > 1,
            ]
            for a, anchor_wh in enumerate(anchor_grid):
                ratio = gwh / anchor_wh
                if np.maximum(ratio, 1 / ratio).max() >= hyper.anchor_ratio_threshold:
                    continue
                for offset, ok in zip(_OFFSETS, allowed):
                    if not ok:
                        continue
                    cell = np.floor(gxy - offset * g).astype(np.int64)
                    cell = np.clip(cell, 0, grid - 1)
                    target = np.concatenate([gxy - cell, gwh])
                    rows.append(
                        (int(b), a, int(cell[0]), int(cell[1]), gt_index, target, int(class_id), anchor_wh)
                    )
        heads.append(_head_targets(rows))
    return TargetAssignment(heads)


def _head_targets(rows: list[tuple]) -> HeadTargets:
    if not rows:
        empty = np.zeros(0, dtype=np.int64)
        return HeadTargets(empty, empty, empty, empty, empty, np.zeros((0, 4)), empty, np.zeros((0, 2)))
    image, anchor, gx, gy, gt, box, class_id, anchor_wh = zip(*rows)
    return HeadTargets(
        image=np.asarray(image, dtype=np.int64),
        anchor=np.asarray(anchor, dtype=np.int64),
        gx=np.asarray(gx, dtype=np.int64),
        gy=np.asarray(gy, dtype=np.int64),
        gt=np.asarray(gt, dtype=np.int64),
        box=np.stack(box),
        class_id=np.asarray(class_id, dtype=np.int64),
        anchor_wh=np.stack(anchor_wh),
    )


def bbox_ciou(
    pred: tuple[Tensor, Tensor, Tensor, Tensor],
    target: np.ndarray,
    alpha: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Complete IoU between predicted (x, y, w, h) columns and constant (M, 4) targets.

    Returns the CIoU tensor and the aspect trade-off weight alpha, which is treated as a constant
    (pass a stored alpha back in to reproduce the same function).
    """
    px, py, pw, ph = pred
    like = px.data.dtype
    tx, ty, tw, th = (Tensor(target[:, i].astype(like)) for i in range(4))
    p_x1, p_x2 = px - pw / 2, px + pw / 2
    p_y1, p_y2 = py - ph / 2, py + ph / 2
    t_x1, t_x2 = tx - tw / 2, tx + tw / 2
    t_y1, t_y2 = ty - th / 2, ty + th / 2
    inter_w = clamp_min(minimum(p_x2, t_x2) - maximum(p_x1, t_x1), 0.0)
    inter_h = clamp_min(minimum(p_y2, t_y2) - maximum(p_y1, t_y1), 0.0)
    inter = inter_w * inter_h
    union = pw * ph + tw * th - inter + CIOU_EPS
    overlap = inter / union
    hull_w = maximum(p_x2, t_x2) - minimum(p_x1, t_x1)
    hull_h = maximum(p_y2, t_y2) - minimum(p_y1, t_y1)
    diagonal = hull_w**2 + hull_h**2 + CIOU_EPS
    center_dist = (tx - px) ** 2 + (ty - py) ** 2
    target_angle = np.arctan(target[:, 2] / target[:, 3]).astype(like)
    v = (4 / math.pi**2) * (Tensor(target_angle) - atan(pw / (ph + CIOU_EPS))) ** 2
    if alpha is None:
        alpha = v.data / (v.data - overlap.data + (1 + CIOU_EPS))
    return overlap - (center_dist / diagonal + v * Tensor(alpha.astype(like))), alpha


def compute_loss(
    outputs: list[Tensor],
    gts: list[list[GroundTruth]] | TargetAssignment,
    config: ModelConfig,
    hyper: Hyper | None = None,
    detached: dict[int, tuple[np.ndarray, np.ndarray]] | None = None,
) -> LossResult:
    """Total = box_gain * box + obj_gain * obj + cls_gain * cls, each a per-batch mean.

    `detached` replays the constants of an earlier call (alpha, objectness targets) so that finite
    differences see the same function the analytic gradient differentiates.
    """
    if len(outputs) != len(config.strides):
        raise ShapeError(f"expected {len(config.strides)} head outputs, got {len(outputs)}")
    hyper = hyper or Hyper()
    assignment = gts if isinstance(gts, TargetAssignment) else assign_targets(gts, config, hyper)
    balance = [OBJ_BALANCE[stride] for stride in config.strides]
    n_out = config.num_outputs
    zero = Tensor(np.zeros((), dtype=outputs[0].dtype))
    box_loss, obj_loss, cls_loss = zero, zero, zero
    kept: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    for i, (raw, targets) in enumerate(zip(outputs, assignment.heads)):
        batch, channels, grid_h, grid_w = raw.shape
        if channels != config.head_channels:
            raise ShapeError(f"head {i}: expected {config.head_channels} channels, got {channels}")
        p = raw.reshape(batch, channels // n_out, n_out, grid_h, grid_w)
        obj_target = np.zeros((batch, channels // n_out, grid_h, grid_w), dtype=raw.dtype)
        replay = detached.get(i) if detached else None
        if len(targets):
            picked = getitem(p, (targets.image, targets.anchor, slice(None), targets.gy, targets.gx))
            xy = sigmoid(picked[:, 0:2]) * 2 - 0.5
            wh = (sigmoid(picked[:, 2:4]) * 2) ** 2 * Tensor(targets.anchor_wh.astype(raw.dtype))
            ciou, alpha = bbox_ciou(
                (xy[:, 0], xy[:, 1], wh[:, 0], wh[:, 1]), targets.box, None if replay is None else replay[0]
            )
            box_loss = box_loss + mean_all(1.0 - ciou)
            if replay is None:
                score = (1.0 - hyper.iou_ratio) + hyper.iou_ratio * np.clip(ciou.data, 0, None)
            else:
                score = replay[1]
            # later matches overwrite earlier ones in the same slot
            obj_target[targets.image, targets.anchor, targets.gy, targets.gx] = score
            kept[i] = (alpha, score)
            if config.num_classes > 1:
                one_hot = np.zeros((len(targets), config.num_classes), dtype=raw.dtype)
                one_hot[np.arange(len(targets)), targets.class_id] = 1.0
                cls_loss = cls_loss + mean_all(bce_with_logits(picked[:, 5:], one_hot))
        obj_loss = obj_loss + mean_all(bce_with_logits(p[:, :, 4], obj_target)) * balance[i]

    total = box_loss * hyper.box_gain + obj_loss * hyper.obj_gain + cls_loss * hyper.cls_gain
    report = LossReport(
        box=box_loss.item(),
        obj=obj_loss.item(),
        cls=cls_loss.item(),
        total=total.item(),
        num_targets=assignment.total(),
    )
    return LossResult(total, report, kept)
