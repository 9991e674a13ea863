"""Detector assembly: CSP backbone with a self-attention stage, FPN+PAN neck, FSA on every head input, heads.

The layer list is planned statically from a `ModelConfig` (`plan`) and the detector is built from that
plan, so parameter counts and channel contracts are known before any weight is allocated.
"""

import time
from dataclasses import dataclass

import numpy as np

from src.blocks import ConvBlock
from src.blocks import CspStage
from src.blocks import Module
from src.blocks import Sppf
from src.blocks import kaiming_uniform
from src.blocks import zeros_parameter
from src.fsa import FsaModule
from src.model_config import DEFAULT_ANCHORS
from src.model_config import ConfigError
from src.model_config import ModelConfig
from src.tensor import ShapeError
from src.tensor import Tensor
from src.tensor import concat
from src.tensor import conv2d
from src.tensor import upsample_nearest

LEVEL_NAMES = {4: "p2", 8: "p3", 16: "p4", 32: "p5"}
BACKBONE_STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class LayerPlan:
    name: str
    kind: str  # conv | csp | csp-mhsa | sppf | fsa | head
    cin: int
    cout: int
    stride: int = 1
    k: int = 1
    depth: int = 1
    shortcut: bool = True
    params: int = 0


class DetectHead(Module):
    """1x1 convolution with bias to anchors x (box, objectness, classes)."""

    def __init__(self, cin: int, cout: int, *, rng: np.random.Generator):
        super().__init__()
        self.cin = cin
        self.weight = kaiming_uniform((cout, cin, 1, 1), cin, rng)
        self.bias = zeros_parameter((cout,))

    @staticmethod
    def param_count(cin: int, cout: int) -> int:
        return cout * cin + cout

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)


def _conv(name: str, cin: int, cout: int, k: int, stride: int = 1) -> LayerPlan:
    return LayerPlan(name, "conv", cin, cout, stride, k, params=ConvBlock.param_count(cin, cout, k))


def _csp(
    name: str, cin: int, cout: int, depth: int, shortcut: bool = True, attention: bool = False
) -> LayerPlan:
    kind = "csp-mhsa" if attention else "csp"
    params = CspStage.param_count(cin, cout, depth, attention)
    return LayerPlan(name, kind, cin, cout, depth=depth, shortcut=shortcut, params=params)


def plan(config: ModelConfig) -> list[LayerPlan]:
    """Ordered layer list for `config`. Raises ConfigError on a contract violation."""
    config.validate()
    widths, depths = config.width_per_stage, config.depth_per_stage
    layers = [_conv("stem", 3, widths[0], 3, 2)]
    for i in range(4):
        cin, cout = widths[i], widths[i + 1]
        layers.append(_conv(f"down{i + 1}", cin, cout, 3, 2))
        layers.append(_csp(f"stage{i + 1}", cout, cout, depths[i], attention=config.use_mhsa and i == 3))
    sppf_params = Sppf.param_count(widths[4], widths[4])
    layers.append(LayerPlan("sppf", "sppf", widths[4], widths[4], params=sppf_params))

    levels = config.level_widths
    level_depths = depths[-len(levels) :]
    for i in range(len(levels) - 2, -1, -1):
        layers.append(_conv(f"lateral{i}", levels[i + 1], levels[i], 1))
        layers.append(_csp(f"topdown{i}", 2 * levels[i], levels[i], level_depths[i], shortcut=False))
    for i in range(1, len(levels)):
        layers.append(_conv(f"downsample{i}", levels[i - 1], levels[i - 1], 3, 2))
        layers.append(_csp(f"bottomup{i}", 2 * levels[i - 1], levels[i], level_depths[i], shortcut=False))
    for i, stride in enumerate(config.strides):
        if config.use_fsa:
            params = FsaModule.param_count(levels[i], config.fsa_r, config.fsa_k)
            layers.append(LayerPlan(f"fsa_{LEVEL_NAMES[stride]}", "fsa", levels[i], levels[i], params=params))
    for i, stride in enumerate(config.strides):
        params = DetectHead.param_count(levels[i], config.head_channels)
        name = f"head_{LEVEL_NAMES[stride]}"
        layers.append(LayerPlan(name, "head", levels[i], config.head_channels, params=params))
    _check_wiring(config, layers)
    return layers


def _check_wiring(config: ModelConfig, layers: list[LayerPlan]) -> None:
    """Every concat in the neck must see the channel sum its CSP stage expects."""
    by_name = {layer.name: layer for layer in layers}
    levels = config.level_widths
    for i in range(len(levels) - 1):
        lateral, merge = by_name[f"lateral{i}"], by_name[f"topdown{i}"]
        if lateral.cout + levels[i] != merge.cin:
            raise ConfigError("width_per_stage", f"top-down merge at level {i} expects {merge.cin} channels")
    for i in range(1, len(levels)):
        down, merge = by_name[f"downsample{i}"], by_name[f"bottomup{i}"]
        if down.cout + by_name[f"lateral{i - 1}"].cout != merge.cin:
            raise ConfigError("width_per_stage", f"bottom-up merge at level {i} expects {merge.cin} channels")


def count_parameters(config: ModelConfig) -> int:
    return sum(layer.params for layer in plan(config))


def _build_layer(layer: LayerPlan, config: ModelConfig, rng: np.random.Generator) -> Module:
    if layer.kind == "conv":
        return ConvBlock(layer.cin, layer.cout, layer.k, layer.stride, rng=rng)
    if layer.kind in ("csp", "csp-mhsa"):
        heads = config.mhsa_heads if layer.kind == "csp-mhsa" else 0
        return CspStage(layer.cin, layer.cout, layer.depth, layer.shortcut, rng=rng, attention_heads=heads)
    if layer.kind == "sppf":
        return Sppf(layer.cin, layer.cout, rng=rng)
    if layer.kind == "fsa":
        return FsaModule(layer.cin, config.fsa_r, config.fsa_k, rng=rng)
    if layer.kind == "head":
        return DetectHead(layer.cin, layer.cout, rng=rng)
    raise ConfigError("kind", f"unknown layer kind {layer.kind!r}")


class Detector(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.layers = plan(config)
        built = {layer.name: _build_layer(layer, config, rng) for layer in self.layers}
        n_levels = len(config.strides)
        self.stem = built["stem"]
        self.down = [built[f"down{i}"] for i in range(1, 5)]
        self.stages = [built[f"stage{i}"] for i in range(1, 5)]
        self.sppf = built["sppf"]
        self.lateral = [built[f"lateral{i}"] for i in range(n_levels - 1)]
        self.topdown = [built[f"topdown{i}"] for i in range(n_levels - 1)]
        self.downsample = [built[f"downsample{i}"] for i in range(1, n_levels)]
        self.bottomup = [built[f"bottomup{i}"] for i in range(1, n_levels)]
        self.fsa = [built[f"fsa_{LEVEL_NAMES[s]}"] for s in config.strides] if config.use_fsa else []
        self.heads = [built[f"head_{LEVEL_NAMES[s]}"] for s in config.strides]

    @property
    def site_names(self) -> list[str]:
        return [LEVEL_NAMES[s] for s in self.config.strides]

    def _check_input(self, images: Tensor) -> None:
        size = self.config.input_size
        if images.ndim != 4 or images.shape[1:] != (3, size, size):
            raise ShapeError(f"expected images of shape (B, 3, {size}, {size}), got {images.shape}")

    def backbone(self, images: Tensor) -> list[Tensor]:
        """Feature maps at strides 4, 8, 16 and 32."""
        x = self.stem(images)
        features = []
        for i, (down, stage) in enumerate(zip(self.down, self.stages)):
            x = stage(down(x))
            if i == 3:
                x = self.sppf(x)
            features.append(x)
        return features

    def neck(self, features: list[Tensor]) -> list[Tensor]:
        """Top-down then bottom-up fusion over the detection levels, finest first."""
        used = features[-len(self.config.strides) :]
        x = used[-1]
        laterals: dict[int, Tensor] = {}
        for i in range(len(used) - 2, -1, -1):
            laterals[i] = self.lateral[i](x)
            x = self.topdown[i](concat([upsample_nearest(laterals[i]), used[i]], axis=1))
        outputs = [x]
        for i in range(1, len(used)):
            x = self.bottomup[i - 1](concat([self.downsample[i - 1](x), laterals[i - 1]], axis=1))
            outputs.append(x)
        return outputs

    def forward(self, images: Tensor, timings: dict[str, float] | None = None) -> list[Tensor]:
        """Raw head outputs, one (B, 3*(5+nc), H_i, W_i) tensor per stride, finest first."""
        self._check_input(images)
        clock = time.perf_counter()
        marks: dict[str, float] = {}

        def lap(section: str) -> None:
            nonlocal clock
            now = time.perf_counter()
            marks[section] = now - clock
            clock = now

        features = self.backbone(images)
        lap("backbone")
        sites = self.neck(features)
        lap("neck")
        if self.fsa:
            sites = [fsa(site) for fsa, site in zip(self.fsa, sites)]
        lap("fsa")
        outputs = [head(site) for head, site in zip(self.heads, sites)]
        lap("heads")
        if timings is not None:
            for section, seconds in marks.items():
                timings[section] = timings.get(section, 0.0) + seconds
        return outputs

    def attention_maps(self, images: Tensor) -> dict[str, Tensor]:
        """FSA importance map at every head input, keyed by level name. Empty without FSA."""
        self._check_input(images)
        if not self.fsa:
            return {}
        sites = self.neck(self.backbone(images))
        return {name: fsa.attention_map(site) for name, fsa, site in zip(self.site_names, self.fsa, sites)}


def build(config: ModelConfig, seed: int = 0) -> Detector:
    """Allocate a detector; identical (config, seed) pairs give bitwise-identical weights."""
    return Detector(config.validate(), np.random.default_rng(seed))


# Ablation family: each entry adds one component on top of the previous row.
VARIANTS: dict[str, dict] = {
    "baseline": {"strides": (8, 16, 32), "use_mhsa": False, "use_fsa": False},
    "tiny-head": {"strides": (4, 8, 16, 32), "use_mhsa": False, "use_fsa": False},
    "tiny-head+mhsa": {"strides": (4, 8, 16, 32), "use_mhsa": True, "use_fsa": False},
    "fsa-yolo": {"strides": (4, 8, 16, 32), "use_mhsa": True, "use_fsa": True},
}


def variant_config(name: str, base: ModelConfig | None = None) -> ModelConfig:
    if name not in VARIANTS:
        raise ConfigError("variant", f"unknown variant {name!r}, expected one of {sorted(VARIANTS)}")
    base = base or ModelConfig()
    changes = dict(VARIANTS[name])
    if len(changes["strides"]) != len(base.anchors):
        # three-head variants keep the coarser anchor sets
        four_level = base.anchors if len(base.anchors) == 4 else DEFAULT_ANCHORS
        changes["anchors"] = four_level[-len(changes["strides"]) :]
    return base.with_overrides(**changes)
