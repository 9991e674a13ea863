"""Synthetic desk scenes with labeled smart-home devices, and the on-disk dataset reader.

Layout of a generated dataset directory:
    images/00000.ppm ...    RGB, binary PPM
    labels/00000.txt ...    one `class cx cy w h` line per device, coordinates normalized to [0, 1]
    classes.txt             class names, one per line, id = line number
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import fields
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image
from PIL import ImageDraw
from PIL import UnidentifiedImageError

from src.config import worker_threads
from src.observability import get_logger
from src.observability import metrics
from src.tensor import Tensor

logger = get_logger(__name__)

CLASS_NAMES = ("smart_speaker", "smart_display", "smart_plug")
IMAGE_SUFFIXES = (".ppm", ".png", ".pgm")
LABEL_DECIMALS = 6


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruth:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def validate(self, num_classes: int | None = None) -> "GroundTruth":
        if self.class_id < 0 or (num_classes is not None and self.class_id >= num_classes):
            raise DatasetError(f"class id {self.class_id} out of range")
        if not (0 < self.w <= 1 and 0 < self.h <= 1):
            raise DatasetError(f"box size ({self.w}, {self.h}) must be in (0, 1]")
        if not (0 <= self.cx <= 1 and 0 <= self.cy <= 1):
            raise DatasetError(f"box center ({self.cx}, {self.cy}) must be in [0, 1]")
        return self

    def to_line(self) -> str:
        return f"{self.class_id} {self.cx:.6f} {self.cy:.6f} {self.w:.6f} {self.h:.6f}"

    def pixels(self, image_size: int) -> tuple[float, float, float, float]:
        """(cx, cy, w, h) in pixels."""
        return self.cx * image_size, self.cy * image_size, self.w * image_size, self.h * image_size


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 160
    num_classes: int = 3
    min_devices: int = 1
    max_devices: int = 4
    device_scale: tuple[float, float] = (0.10, 0.35)  # box height as a fraction of the image
    tiny_scale: tuple[float, float] = (0.02, 0.06)
    tiny_fraction: float = 0.3  # probability a device is drawn in the tiny tier
    tiny_only: bool = False
    clutter_density: float = 1.0  # mean distractor shapes = 8 * density
    lighting_jitter: float = 0.2
    noise: float = 4.0  # sensor noise std on the 0..255 scale
    seed: int = 0

    def validate(self) -> "SceneSpec":
        if self.image_size < 16:
            raise DatasetError(f"image_size must be >= 16, got {self.image_size}")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise DatasetError(f"num_classes must be in 1..{len(CLASS_NAMES)}, got {self.num_classes}")
        if not 0 <= self.min_devices <= self.max_devices:
            raise DatasetError(f"device count range ({self.min_devices}, {self.max_devices}) is empty")
        for name in ("device_scale", "tiny_scale"):
            low, high = getattr(self, name)
            if not 0 < low <= high <= 1:
                raise DatasetError(f"{name} must satisfy 0 < low <= high <= 1, got ({low}, {high})")
        if not 0 <= self.tiny_fraction <= 1:
            raise DatasetError(f"tiny_fraction must be in [0, 1], got {self.tiny_fraction}")
        if self.clutter_density < 0 or self.lighting_jitter < 0 or self.noise < 0:
            raise DatasetError("clutter_density, lighting_jitter and noise must be non-negative")
        return self


def parse_scene_spec(text: str, source: str = "<scene>") -> SceneSpec:
    """`key = value` lines over the SceneSpec defaults; ranges as `low, high`."""
    known = {f.name: f for f in fields(SceneSpec)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, raw = (part.strip() for part in stripped.partition("="))
        if not sep or key not in known:
            raise DatasetError(f"{source}:{lineno}: unknown or malformed entry {line.strip()!r}")
        default = getattr(SceneSpec, key)
        try:
            if isinstance(default, bool):
                values[key] = raw.lower() in ("true", "1", "yes", "on")
            elif isinstance(default, tuple):
                values[key] = tuple(float(v) for v in raw.split(","))
            elif isinstance(default, int):
                values[key] = int(raw)
            else:
                values[key] = float(raw)
        except ValueError:
            raise DatasetError(f"{source}:{lineno}: bad value for {key}: {raw!r}") from None
    return SceneSpec(**values).validate()


def _muted(rng: np.random.Generator, base: np.ndarray, spread: int) -> tuple[int, int, int]:
    color = np.clip(base + rng.integers(-spread, spread + 1, size=3), 0, 255)
    return tuple(int(c) for c in color)


def _draw_device(draw: ImageDraw.ImageDraw, class_id: int, x0: int, y0: int, x1: int, y1: int) -> None:
    w, h = x1 - x0 + 1, y1 - y0 + 1
    if class_id == 0:
        # speaker: charcoal cylinder seen side-on, cyan light ring on top
        draw.ellipse([x0, y0, x1, y1], fill=(38, 38, 44))
        if h >= 8:
            ring = max(1, h // 8)
            draw.ellipse([x0 + w // 6, y0, x1 - w // 6, y0 + 2 * ring], fill=(0, 175, 225))
    elif class_id == 1:
        # display: white bezel around a blue screen
        draw.rectangle([x0, y0, x1, y1], fill=(238, 238, 232))
        bezel = max(1, min(w, h) // 8)
        if w > 2 * bezel + 1 and h > 2 * bezel + 1:
            draw.rectangle([x0 + bezel, y0 + bezel, x1 - bezel, y1 - bezel], fill=(28, 62, 168))
    else:
        # plug: orange block with two dark prongs
        draw.rectangle([x0, y0, x1, y1], fill=(248, 122, 32))
        if w >= 6 and h >= 6:
            pin = max(1, w // 8)
            my = y0 + h // 2
            for px in (x0 + w // 4, x1 - w // 4):
                draw.rectangle([px - pin // 2, my - pin, px + pin // 2, my + pin], fill=(30, 20, 15))


_ASPECT = (0.75, 1.45, 1.0)  # w / h per class


def _box_iou(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0]) + 1
    ih = min(a[3], b[3]) - max(a[1], b[1]) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)


def render_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, list[GroundTruth]]:
    """One (S, S, 3) uint8 scene and its labels; a pure function of (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    base = rng.integers(90, 170, size=3)
    image = Image.new("RGB", (size, size), tuple(int(c) for c in base))
    draw = ImageDraw.Draw(image)

    for _ in range(rng.poisson(8 * spec.clutter_density)):
        x0, y0 = (int(v) for v in rng.integers(0, size, size=2))
        x1 = min(size - 1, x0 + int(rng.integers(2, size // 3)))
        y1 = min(size - 1, y0 + int(rng.integers(2, size // 3)))
        color = _muted(rng, base, 35)
        shape = rng.integers(3)
        if shape == 0:
            draw.rectangle([x0, y0, x1, y1], fill=color)
        elif shape == 1:
            draw.ellipse([x0, y0, x1, y1], outline=color, width=2)
        else:
            draw.line([x0, y0, x1, y1], fill=color, width=int(rng.integers(1, 4)))

    labels: list[GroundTruth] = []
    placed: list[tuple[int, int, int, int]] = []
    for _ in range(int(rng.integers(spec.min_devices, spec.max_devices + 1))):
        class_id = int(rng.integers(spec.num_classes))
        tiny = spec.tiny_only or rng.random() < spec.tiny_fraction
        low, high = spec.tiny_scale if tiny else spec.device_scale
        h = max(3, min(size, round(rng.uniform(low, high) * size)))
        w = max(3, min(size, round(h * _ASPECT[class_id] * rng.uniform(0.85, 1.15))))
        for _attempt in range(10):
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            box = (x0, y0, x0 + w - 1, y0 + h - 1)
            if all(_box_iou(box, other) < 0.2 for other in placed):
                break
        placed.append(box)
        _draw_device(draw, class_id, *box)
        labels.append(
            GroundTruth(
                class_id,
                round((x0 + w / 2) / size, LABEL_DECIMALS),
                round((y0 + h / 2) / size, LABEL_DECIMALS),
                round(w / size, LABEL_DECIMALS),
                round(h / size, LABEL_DECIMALS),
            )
        )

    pixels = np.asarray(image, dtype=np.float64)
    if spec.lighting_jitter:
        angle = rng.uniform(0, 2 * math.pi)
        ramp = np.linspace(-0.5, 0.5, size)
        gradient = math.cos(angle) * ramp[None, :] + math.sin(angle) * ramp[:, None]
        gain = 1 + rng.uniform(-spec.lighting_jitter, spec.lighting_jitter) + spec.lighting_jitter * gradient
        pixels = pixels * gain[:, :, None]
    if spec.noise:
        pixels = pixels + rng.normal(0, spec.noise, size=pixels.shape)
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8), labels


def _write_sample(spec: SceneSpec, index: int, root: Path) -> list[GroundTruth]:
    pixels, labels = render_scene(spec, index)
    stem = f"{index:05d}"
    Image.fromarray(pixels).save(root / "images" / f"{stem}.ppm", format="PPM")
    (root / "labels" / f"{stem}.txt").write_text("".join(f"{g.to_line()}\n" for g in labels))
    return labels


def generate(spec: SceneSpec, n: int, out_dir: str | Path, workers: int | None = None) -> Path:
    """Write `n` scenes under `out_dir`; identical (spec, n) always gives identical files."""
    spec.validate()
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    (root / "classes.txt").write_text("".join(f"{name}\n" for name in CLASS_NAMES[: spec.num_classes]))
    with ThreadPoolExecutor(max_workers=workers or worker_threads()) as pool:
        all_labels = list(pool.map(lambda i: _write_sample(spec, i, root), range(n)))
    n_boxes = sum(len(labels) for labels in all_labels)
    logger.info(f"[generate] wrote {n} scenes with {n_boxes} devices to {root}")
    metrics.gauge("dataset.generated_images", n)
    return root


@dataclass
class Dataset:
    stems: list[str]
    images: list[np.ndarray]  # (3, S, S) float32 in [0, 1]
    labels: list[list[GroundTruth]]
    class_names: list[str]
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_size(self) -> int | None:
        return self.images[0].shape[-1] if self.images else None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def batch(self, indices) -> tuple[Tensor, list[list[GroundTruth]]]:
        indices = list(indices)
        return Tensor(np.stack([self.images[i] for i in indices])), [self.labels[i] for i in indices]

    def subset(self, indices) -> "Dataset":
        indices = list(indices)
        return replace(
            self,
            stems=[self.stems[i] for i in indices],
            images=[self.images[i] for i in indices],
            labels=[self.labels[i] for i in indices],
        )


def read_image(path: Path) -> np.ndarray:
    """(3, H, W) float32 in [0, 1]."""
    try:
        with Image.open(path) as image:
            pixels = np.asarray(image.convert("RGB"), dtype=np.float32)
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"{path}: cannot read image: {exc}") from exc
    return (pixels / 255.0).transpose(2, 0, 1).copy()


def parse_labels(path: Path, num_classes: int | None = None) -> list[GroundTruth]:
    labels = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise DatasetError(f"{path}:{lineno}: expected 'class cx cy w h', got {line.strip()!r}")
        try:
            gt = GroundTruth(int(parts[0]), *(float(p) for p in parts[1:]))
            labels.append(gt.validate(num_classes))
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return labels


def load_dataset(root: str | Path, num_classes: int | None = None) -> Dataset:
    """Read a dataset directory. An existing but empty directory gives an empty dataset."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: dataset directory not found")
    classes_file = root / "classes.txt"
    class_names = classes_file.read_text().split() if classes_file.exists() else list(CLASS_NAMES)
    num_classes = num_classes or len(class_names)
    image_dir = root / "images"
    paths = sorted(p for p in image_dir.iterdir() if p.suffix in IMAGE_SUFFIXES) if image_dir.is_dir() else []
    stems, images, labels = [], [], []
    for path in paths:
        image = read_image(path)
        if image.shape[1] != image.shape[2] or (images and image.shape != images[0].shape):
            raise DatasetError(f"{path}: all images must share one square size, got {image.shape[1:]}")
        label_path = root / "labels" / f"{path.stem}.txt"
        stems.append(path.stem)
        images.append(image)
        labels.append(parse_labels(label_path, num_classes) if label_path.exists() else [])
    logger.info(f"[load_dataset] {len(images)} images from {root}")
    return Dataset(stems, images, labels, class_names[:num_classes], root)


def kmeans_anchors(
    labels: list[list[GroundTruth]],
    image_size: int,
    n: int = 12,
    seed: int = 0,
    iterations: int = 50,
) -> list[tuple[float, float]] | None:
    """Cluster label sizes (pixels) into `n` anchors sorted by area; None with fewer than `n` boxes.

    Distance is 1 - IoU of origin-aligned boxes, the usual choice for anchor fitting.
    """
    wh = np.array([(g.w * image_size, g.h * image_size) for image in labels for g in image], dtype=np.float64)
    if len(wh) < n:
        return None
    rng = np.random.default_rng(seed)
    centers = wh[rng.choice(len(wh), size=n, replace=False)]
    for _ in range(iterations):
        inter = np.minimum(wh[:, None, 0], centers[None, :, 0])
        inter = inter * np.minimum(wh[:, None, 1], centers[None, :, 1])
        union = wh[:, None].prod(axis=2) + centers[None, :].prod(axis=2) - inter
        assignment = np.argmax(inter / union, axis=1)
        updated = np.array(
            [wh[assignment == k].mean(axis=0) if np.any(assignment == k) else centers[k] for k in range(n)]
        )
        if np.allclose(updated, centers):
            break
        centers = updated
    order = np.argsort(centers.prod(axis=1), kind="stable")
    return [(round(float(w), 2), round(float(h), 2)) for w, h in centers[order]]
