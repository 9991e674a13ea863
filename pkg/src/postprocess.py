"""Head-output decoding, its algebraic inverse, IoU and class-wise greedy NMS."""

from dataclasses import dataclass

import numpy as np

from src.model_config import AnchorSet
from src.model_config import ModelConfig
from src.tensor import ContractError
from src.tensor import ShapeError
from src.tensor import Tensor
from src.tensor import no_grad

# |logit| written by `encode`; sigmoid(12)^2 > 0.9999.
ENCODE_LOGIT = 12.0
# Objectness and class scores are held inside the open unit interval, so the confidence
# threshold 1.0 keeps nothing and saturated negatives still score above zero.
SCORE_RANGE = (float(np.sqrt(np.finfo(np.float64).tiny)), float(np.nextafter(1.0, 0.0)))


@dataclass(frozen=True, slots=True)
class DetBox:
    """Decoded detection in input pixels; confidence = objectness * class_scores[class_id]."""

    cx: float
    cy: float
    w: float
    h: float
    objectness: float
    class_scores: tuple[float, ...]
    confidence: float
    class_id: int

    @classmethod
    def from_scores(
        cls, cx: float, cy: float, w: float, h: float, objectness: float, class_scores: tuple[float, ...]
    ) -> "DetBox":
        class_id = int(np.argmax(class_scores))  # first maximum, so the lower id wins ties
        confidence = float(objectness * class_scores[class_id])
        xywh = (float(cx), float(cy), float(w), float(h))
        return cls(*xywh, float(objectness), tuple(class_scores), confidence, class_id)

    @property
    def xywh(self) -> tuple[float, float, float, float]:
        return self.cx, self.cy, self.w, self.h

    def to_line(self) -> str:
        return f"{self.class_id} {self.confidence:.6f} {self.cx:.3f} {self.cy:.3f} {self.w:.3f} {self.h:.3f}"


def xywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = boxes[:, 2:] / 2
    return np.concatenate([boxes[:, :2] - half, boxes[:, :2] + half], axis=1)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) center-format boxes."""
    a, b = xywh_to_xyxy(a), xywh_to_xyxy(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.clip(rb - lt, 0, None).prod(axis=2)
    area_a = (a[:, 2:] - a[:, :2]).prod(axis=1)
    area_b = (b[:, 2:] - b[:, :2]).prod(axis=1)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def iou(a, b) -> float:
    """IoU of two boxes given as DetBox or (cx, cy, w, h)."""
    a = a.xywh if isinstance(a, DetBox) else a
    b = b.xywh if isinstance(b, DetBox) else b
    return float(iou_matrix(np.asarray([a]), np.asarray([b]))[0, 0])


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    positive = z >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-z[positive]))
    ez = np.exp(z[~positive])
    out[~positive] = ez / (1.0 + ez)
    return out


def _logit(p: np.ndarray) -> np.ndarray:
    return np.log(p) - np.log1p(-p)


def _head_array(raw: Tensor | np.ndarray, anchors: AnchorSet) -> np.ndarray:
    data = raw.data if isinstance(raw, Tensor) else np.asarray(raw)
    if data.ndim == 4:
        if data.shape[0] != 1:
            raise ShapeError(f"decode takes one image at a time, got batch {data.shape[0]}")
        data = data[0]
    if data.ndim != 3 or data.shape[0] % len(anchors) or data.shape[0] // len(anchors) < 6:
        raise ShapeError(f"head output must be ({len(anchors)}*(5+nc), H, W), got {data.shape}")
    return data.astype(np.float64).reshape(len(anchors), data.shape[0] // len(anchors), *data.shape[1:])


def decode(
    raw: Tensor | np.ndarray,
    anchors: AnchorSet,
    stride: int,
    conf_threshold: float,
    image_size: int | None = None,
) -> list[DetBox]:
    """Boxes from one head of one image with confidence >= `conf_threshold`.

    Centers are clipped to the image; order is anchor, then row, then column.
    """
    p = _head_array(raw, anchors)
    n_anchors, _, grid_h, grid_w = p.shape
    image_size = image_size or grid_w * stride
    s = _sigmoid(p)
    s[:, 4:] = np.clip(s[:, 4:], *SCORE_RANGE)
    objectness = s[:, 4]
    class_scores = s[:, 5:]
    confidence = objectness * class_scores.max(axis=1)
    keep = np.argwhere(confidence >= conf_threshold)
    if keep.size == 0:
        return []
    anchor_wh = np.asarray(anchors, dtype=np.float64)
    boxes = []
    for a, gy, gx in keep:
        cx = np.clip((2 * s[a, 0, gy, gx] - 0.5 + gx) * stride, 0, image_size)
        cy = np.clip((2 * s[a, 1, gy, gx] - 0.5 + gy) * stride, 0, image_size)
        w = anchor_wh[a, 0] * (2 * s[a, 2, gy, gx]) ** 2
        h = anchor_wh[a, 1] * (2 * s[a, 3, gy, gx]) ** 2
        scores = tuple(class_scores[a, :, gy, gx])
        boxes.append(DetBox.from_scores(cx, cy, w, h, objectness[a, gy, gx], scores))
    return boxes


def best_anchor(w: float, h: float, anchors: AnchorSet) -> int:
    ratios = [max(w / aw, aw / w, h / ah, ah / h) for aw, ah in anchors]
    return int(np.argmin(ratios))


def encode(
    boxes: list[tuple[int, float, float, float, float]],
    anchors: AnchorSet,
    stride: int,
    grid: tuple[int, int],
    num_classes: int,
) -> np.ndarray:
    """Raw head logits that `decode` maps back to `boxes` ((class, cx, cy, w, h) in pixels).

    Each box goes to its best-ratio anchor in the cell holding its center; every other slot is
    background. Sizes must be below 4x the anchor, the largest (2*sigmoid)^2 can express.
    """
    grid_h, grid_w = grid
    n_out = 5 + num_classes
    raw = np.zeros((len(anchors), n_out, grid_h, grid_w), dtype=np.float64)
    raw[:, 4:] = -ENCODE_LOGIT
    for class_id, cx, cy, w, h in boxes:
        a = best_anchor(w, h, anchors)
        aw, ah = anchors[a]
        if not (0 < w / aw < 4 and 0 < h / ah < 4):
            raise ContractError(f"box {w:.2f}x{h:.2f} cannot be expressed by anchor {aw}x{ah}")
        gx = min(int(cx // stride), grid_w - 1)
        gy = min(int(cy // stride), grid_h - 1)
        offset = np.array([cx / stride - gx, cy / stride - gy])
        if np.any(offset <= -0.5) or np.any(offset >= 1.5):
            raise ContractError(f"center ({cx}, {cy}) is outside the reach of cell ({gx}, {gy})")
        raw[a, 0:2, gy, gx] = _logit((offset + 0.5) / 2)
        raw[a, 2, gy, gx] = _logit(np.sqrt(w / aw) / 2)
        raw[a, 3, gy, gx] = _logit(np.sqrt(h / ah) / 2)
        raw[a, 4, gy, gx] = ENCODE_LOGIT
        raw[a, 5:, gy, gx] = -ENCODE_LOGIT
        raw[a, 5 + class_id, gy, gx] = ENCODE_LOGIT
    return raw.reshape(len(anchors) * n_out, grid_h, grid_w)


def nms(boxes: list[DetBox], iou_threshold: float, max_det: int | None = None) -> list[DetBox]:
    """Class-wise greedy suppression at IoU >= `iou_threshold`, highest confidence first.

    Ties on confidence go to the lower class id, then to the earlier input box.
    """
    if not boxes:
        return []
    n = len(boxes)
    conf = np.fromiter((b.confidence for b in boxes), dtype=np.float64, count=n)
    classes = np.fromiter((b.class_id for b in boxes), dtype=np.int64, count=n)
    xyxy = xywh_to_xyxy(np.array([b.xywh for b in boxes]))
    area = (xyxy[:, 2] - xyxy[:, 0]) * (xyxy[:, 3] - xyxy[:, 1])
    order = np.lexsort((np.arange(n), classes, -conf))
    suppressed = np.zeros(n, dtype=bool)
    keep: list[int] = []
    for position, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(int(i))
        if max_det is not None and len(keep) >= max_det:
            break
        rest = order[position + 1 :]
        rest = rest[(classes[rest] == classes[i]) & ~suppressed[rest]]
        if rest.size == 0:
            continue
        w = np.clip(np.minimum(xyxy[i, 2], xyxy[rest, 2]) - np.maximum(xyxy[i, 0], xyxy[rest, 0]), 0, None)
        h = np.clip(np.minimum(xyxy[i, 3], xyxy[rest, 3]) - np.maximum(xyxy[i, 1], xyxy[rest, 1]), 0, None)
        inter = w * h
        overlap = inter / np.maximum(area[i] + area[rest] - inter, 1e-12)
        suppressed[rest[overlap >= iou_threshold]] = True
    return [boxes[i] for i in keep]


def decode_outputs(
    outputs: list[Tensor | np.ndarray], config: ModelConfig, conf_threshold: float
) -> list[list[DetBox]]:
    """Per-image candidates over every head of a batched forward pass."""
    if len(outputs) != len(config.strides):
        raise ShapeError(f"expected {len(config.strides)} head outputs, got {len(outputs)}")
    arrays = [o.data if isinstance(o, Tensor) else np.asarray(o) for o in outputs]
    batch = arrays[0].shape[0]
    per_image: list[list[DetBox]] = []
    for b in range(batch):
        candidates: list[DetBox] = []
        for array, anchors, stride in zip(arrays, config.anchors, config.strides):
            candidates.extend(decode(array[b], anchors, stride, conf_threshold, config.input_size))
        per_image.append(candidates)
    return per_image


def predict(
    model,
    images: Tensor | np.ndarray,
    conf_threshold: float,
    nms_threshold: float,
    max_det: int | None = None,
) -> list[list[DetBox]]:
    """Eval-mode forward without lineage, decode, then NMS; one list per image."""
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images))
    if images.ndim == 3:
        images = images.reshape(1, *images.shape)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            outputs = model(images)
    finally:
        model.train(was_training)
    candidates = decode_outputs(outputs, model.config, conf_threshold)
    return [nms(c, nms_threshold, max_det) for c in candidates]

