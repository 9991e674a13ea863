"""Training and loss hyperparameters (YOLOv5 scratch defaults, fewer epochs at desk scale)."""

from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import replace


@dataclass(frozen=True)
class Hyper:
    epochs: int = 300
    batch_size: int = 8
    lr0: float = 0.01
    lrf: float = 0.01  # final lr = lr0 * lrf (cosine)
    momentum: float = 0.937
    weight_decay: float = 5e-4
    warmup_epochs: float = 3.0
    warmup_momentum: float = 0.8
    warmup_bias_ratio: float = 10.0  # bias lr starts at warmup_bias_ratio * lr0
    min_warmup_iters: int = 100
    box_gain: float = 0.05
    obj_gain: float = 1.0
    cls_gain: float = 0.5
    anchor_ratio_threshold: float = 4.0
    neighbor_offset: float = 0.5
    iou_ratio: float = 1.0  # objectness target = (1 - iou_ratio) + iou_ratio * clamp(CIoU, 0)
    eval_every: int = 10
    seed: int = 0
    autoanchor: bool = True

    def with_overrides(self, **changes) -> "Hyper":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    def as_dict(self) -> dict:
        return asdict(self)


# Objectness weight by head stride.
OBJ_BALANCE = {4: 4.0, 8: 1.0, 16: 0.4, 32: 0.1}
