"""Full-separation attention (FSA).

The input is pooled separately over H, W and C. The H- and W-pooled maps each pass a pointwise
squeeze-and-excitation gate (channel attention per remaining position); the C-pooled map passes a
k x k convolution gate (spatial attention). The three sigmoid maps are broadcast back to
(B, C, H, W), averaged into a per-pixel importance map A in (0, 1), and the input is rescaled by A.
"""

import numpy as np

from src.blocks import Module
from src.blocks import kaiming_uniform
from src.blocks import zeros_parameter
from src.model_config import ConfigError
from src.tensor import ShapeError
from src.tensor import Tensor
from src.tensor import add
from src.tensor import broadcast_to
from src.tensor import conv2d
from src.tensor import div
from src.tensor import mul
from src.tensor import pool_axis
from src.tensor import sigmoid
from src.tensor import silu


class ChannelGate(Module):
    """Two pointwise projections (C -> C/r -> C), SiLU between, sigmoid out.

    The output projection starts at zero so a fresh gate emits exactly 0.5.
    """

    def __init__(self, channels: int, r: int, *, rng: np.random.Generator):
        super().__init__()
        hidden = channels // r
        self.w1 = kaiming_uniform((hidden, channels, 1, 1), channels, rng)
        self.b1 = zeros_parameter((hidden,))
        self.w2 = zeros_parameter((channels, hidden, 1, 1))
        self.b2 = zeros_parameter((channels,))

    @staticmethod
    def param_count(channels: int, r: int) -> int:
        hidden = channels // r
        return 2 * channels * hidden + hidden + channels

    def forward(self, pooled: Tensor) -> Tensor:
        return sigmoid(conv2d(silu(conv2d(pooled, self.w1, self.b1)), self.w2, self.b2))


class SpatialGate(Module):
    """Single-output k x k convolution over the channel-pooled map, sigmoid out."""

    def __init__(self, k: int):
        super().__init__()
        self.k = k
        self.weight = zeros_parameter((1, 1, k, k))
        self.bias = zeros_parameter((1,))

    @staticmethod
    def param_count(k: int) -> int:
        return k * k + 1

    def forward(self, pooled: Tensor) -> Tensor:
        return sigmoid(conv2d(pooled, self.weight, self.bias, padding=self.k // 2))


class FsaModule(Module):
    def __init__(self, channels: int, r: int = 4, k: int = 7, *, rng: np.random.Generator):
        super().__init__()
        if r < 1 or channels % r:
            raise ConfigError("fsa_r", f"{channels} channels are not divisible by reduction ratio {r}")
        if k < 1 or k % 2 == 0:
            raise ConfigError("fsa_k", f"spatial kernel must be odd, got {k}")
        self.channels = channels
        self.channel_attn_h = ChannelGate(channels, r, rng=rng)
        self.channel_attn_w = ChannelGate(channels, r, rng=rng)
        self.spatial_attn_c = SpatialGate(k)

    @staticmethod
    def param_count(channels: int, r: int, k: int) -> int:
        return 2 * ChannelGate.param_count(channels, r) + SpatialGate.param_count(k)

    def attention_map(self, x: Tensor) -> Tensor:
        """Per-pixel importance A, shape (B, C, H, W), every value in (0, 1)."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"FSA expects (B, {self.channels}, H, W), got {x.shape}")
        branch_h = broadcast_to(self.channel_attn_h(pool_axis(x, "H", "mean")), x.shape)
        branch_w = broadcast_to(self.channel_attn_w(pool_axis(x, "W", "mean")), x.shape)
        branch_c = broadcast_to(self.spatial_attn_c(pool_axis(x, "C", "mean")), x.shape)
        return div(add(add(branch_h, branch_w), branch_c), 3.0)

    def forward(self, x: Tensor) -> Tensor:
        return mul(x, self.attention_map(x))


def fsa_attention_stats(attention: Tensor | np.ndarray) -> dict[str, float]:
    """Mean and mean per-image standard deviation of an attention map."""
    a = attention.data if isinstance(attention, Tensor) else attention
    per_image_std = a.reshape(a.shape[0], -1).std(axis=1)
    return {"mean": float(a.mean()), "std": float(per_image_std.mean())}
