"""Declarative architecture description and its flat `key = value` text format."""

import hashlib
from dataclasses import dataclass
from dataclasses import fields
from dataclasses import replace
from pathlib import Path

Anchor = tuple[float, float]
AnchorSet = tuple[Anchor, Anchor, Anchor]

ANCHORS_PER_HEAD = 3
SUPPORTED_STRIDES = ((4, 8, 16, 32), (8, 16, 32))

# 0.25 x the YOLOv5 widths (64, 128, 256, 512, 1024): stem, then the stride 4/8/16/32 stages.
DEFAULT_WIDTHS = (16, 32, 64, 128, 256)
DEFAULT_DEPTHS = (1, 1, 1, 1)
# Sized for 160 px scenes whose devices span ~3 px (tiny tier) to ~60 px.
DEFAULT_ANCHORS: tuple[AnchorSet, ...] = (
    ((4.0, 5.0), (6.0, 7.0), (9.0, 9.0)),
    ((12.0, 14.0), (17.0, 12.0), (14.0, 21.0)),
    ((24.0, 27.0), (33.0, 24.0), (26.0, 38.0)),
    ((44.0, 48.0), (58.0, 42.0), (46.0, 62.0)),
)


class ConfigError(ValueError):
    """Raised when a model config violates an invariant; `field` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 160
    num_classes: int = 3
    width_per_stage: tuple[int, ...] = DEFAULT_WIDTHS
    depth_per_stage: tuple[int, ...] = DEFAULT_DEPTHS
    use_mhsa: bool = True
    mhsa_heads: int = 4
    use_fsa: bool = True
    fsa_r: int = 4
    fsa_k: int = 7
    strides: tuple[int, ...] = (4, 8, 16, 32)
    anchors: tuple[AnchorSet, ...] = DEFAULT_ANCHORS

    @property
    def num_outputs(self) -> int:
        """Channels per anchor: box (4) + objectness (1) + classes."""
        return 5 + self.num_classes

    @property
    def head_channels(self) -> int:
        return ANCHORS_PER_HEAD * self.num_outputs

    @property
    def tiny_head(self) -> bool:
        return self.strides[0] == 4

    @property
    def level_widths(self) -> tuple[int, ...]:
        """Channel width at each detection level, finest first."""
        return self.width_per_stage[-len(self.strides) :]

    def grid_sizes(self) -> tuple[int, ...]:
        return tuple(self.input_size // s for s in self.strides)

    def validate(self) -> "ModelConfig":
        if self.input_size <= 0 or self.input_size % 32:
            raise ConfigError("input_size", f"must be a positive multiple of 32, got {self.input_size}")
        if self.num_classes < 1:
            raise ConfigError("num_classes", f"must be >= 1, got {self.num_classes}")
        if len(self.width_per_stage) != 5 or any(w < 1 for w in self.width_per_stage):
            raise ConfigError("width_per_stage", f"needs 5 positive widths, got {self.width_per_stage}")
        if len(self.depth_per_stage) != 4 or any(d < 0 for d in self.depth_per_stage):
            raise ConfigError("depth_per_stage", f"needs 4 non-negative depths, got {self.depth_per_stage}")
        if tuple(self.strides) not in SUPPORTED_STRIDES:
            raise ConfigError("strides", f"must be one of {SUPPORTED_STRIDES}, got {self.strides}")
        if len(self.anchors) != len(self.strides):
            raise ConfigError("anchors", f"need one anchor set per stride, got {len(self.anchors)}")
        for anchor_set in self.anchors:
            if len(anchor_set) != ANCHORS_PER_HEAD:
                raise ConfigError("anchors", f"need exactly {ANCHORS_PER_HEAD} anchors per head")
            if any(len(a) != 2 or a[0] <= 0 or a[1] <= 0 for a in anchor_set):
                raise ConfigError("anchors", f"anchors must be positive (w, h) pairs, got {anchor_set}")
        if self.use_fsa:
            if self.fsa_r < 1:
                raise ConfigError("fsa_r", f"must be >= 1, got {self.fsa_r}")
            if self.fsa_k < 1 or self.fsa_k % 2 == 0:
                raise ConfigError("fsa_k", f"must be odd and positive, got {self.fsa_k}")
            for width in self.level_widths:
                if width % self.fsa_r:
                    raise ConfigError("fsa_r", f"FSA site width {width} is not divisible by {self.fsa_r}")
        # the attention block runs on the hidden (half) width of the deepest CSP stage
        attention_dim = self.width_per_stage[-1] // 2
        if self.use_mhsa and (self.mhsa_heads < 1 or attention_dim < 1 or attention_dim % self.mhsa_heads):
            raise ConfigError(
                "mhsa_heads", f"attention width {attention_dim} is not divisible by {self.mhsa_heads} heads"
            )
        return self

    def to_text(self) -> str:
        """Canonical text form; the config hash is taken over this."""
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def with_overrides(self, **changes) -> "ModelConfig":
        return replace(self, **changes).validate()


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        flat = _flatten(value)
        return ", ".join(_format_number(v) for v in flat)
    return _format_number(value)


def _format_number(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _flatten(value) -> list:
    if isinstance(value, tuple):
        return [leaf for item in value for leaf in _flatten(item)]
    return [value]


def _parse_bool(key: str, raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(key, f"expected a boolean, got {raw!r}")


def _parse_numbers(key: str, raw: str, kind: type) -> list:
    try:
        return [kind(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(key, f"expected a comma-separated list of {kind.__name__}, got {raw!r}") from None


def _group_anchors(values: list[float]) -> tuple[AnchorSet, ...]:
    if len(values) % (2 * ANCHORS_PER_HEAD):
        raise ConfigError(
            "anchors", f"need (w, h) pairs in groups of {ANCHORS_PER_HEAD}, got {len(values)} values"
        )
    pairs = [(values[i], values[i + 1]) for i in range(0, len(values), 2)]
    return tuple(tuple(pairs[i : i + ANCHORS_PER_HEAD]) for i in range(0, len(pairs), ANCHORS_PER_HEAD))


def parse_model_config(text: str, source: str = "<config>") -> ModelConfig:
    """Parse `key = value` lines (lists comma-separated) over the defaults, then validate."""
    known = {f.name: f for f in fields(ModelConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError("syntax", f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in known:
            raise ConfigError(key, f"{source}:{lineno}: unknown key")
        if key in ("use_mhsa", "use_fsa"):
            values[key] = _parse_bool(key, raw)
        elif key in ("width_per_stage", "depth_per_stage", "strides"):
            values[key] = tuple(_parse_numbers(key, raw, int))
        elif key == "anchors":
            values[key] = _group_anchors(_parse_numbers(key, raw, float))
        else:
            parsed = _parse_numbers(key, raw, int)
            if len(parsed) != 1:
                raise ConfigError(key, f"{source}:{lineno}: expected a single integer, got {raw!r}")
            values[key] = parsed[0]
    return ModelConfig(**values).validate()


def load_model_config(path: str | Path) -> ModelConfig:
    path = Path(path)
    return parse_model_config(path.read_text(), source=str(path))
