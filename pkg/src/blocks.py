"""Composite layers built on the tensor core: ConvBlock, CSP stage, SPPF and a self-attention block."""

import math
from collections.abc import Iterator

import numpy as np

from src.tensor import ShapeError
from src.tensor import Tensor
from src.tensor import batch_norm
from src.tensor import concat
from src.tensor import conv2d
from src.tensor import get_default_dtype
from src.tensor import matmul
from src.tensor import max_pool2d
from src.tensor import silu
from src.tensor import softmax

BN_MOMENTUM = 0.03
BN_EPS = 1e-3


def kaiming_uniform(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator) -> Tensor:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)): Kaiming-uniform with a=sqrt(5), the usual conv default."""
    bound = 1.0 / math.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())
    return Tensor(data, requires_grad=True)


def zeros_parameter(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=True)


def ones_parameter(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_default_dtype()), requires_grad=True)


class Module:
    """Parameter container. Parameters, buffers and submodules are discovered from attributes in
    assignment order, so naming and enumeration are deterministic."""

    buffer_names: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self.buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.named_children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise ShapeError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in self.named_parameters():
            p.data = _checked(name, state[name], p.data)
        for module_prefix, module in self._modules_with_buffers():
            for buffer in module.buffer_names:
                key = module_prefix + buffer
                setattr(module, buffer, _checked(key, state[key], getattr(module, buffer)))

    def _modules_with_buffers(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        if self.buffer_names:
            yield prefix, self
        for name, child in self.named_children():
            yield from child._modules_with_buffers(f"{prefix}{name}.")


def _checked(name: str, value: np.ndarray, current: np.ndarray) -> np.ndarray:
    if value.shape != current.shape:
        raise ShapeError(f"{name}: stored shape {value.shape} != model shape {current.shape}")
    return np.array(value, dtype=current.dtype, copy=True)


class ConvBlock(Module):
    """Conv (no bias) -> batch norm -> SiLU. Batch statistics in training, running statistics otherwise."""

    buffer_names = ("running_mean", "running_var")

    def __init__(
        self, cin: int, cout: int, k: int = 1, s: int = 1, *, rng: np.random.Generator, act: bool = True
    ):
        super().__init__()
        self.cin, self.cout, self.k, self.s = cin, cout, k, s
        self.weight = kaiming_uniform((cout, cin, k, k), cin * k * k, rng)
        self.gamma = ones_parameter((cout,))
        self.beta = zeros_parameter((cout,))
        self.running_mean = np.zeros(cout, dtype=get_default_dtype())
        self.running_var = np.ones(cout, dtype=get_default_dtype())
        self.act = act

    @staticmethod
    def param_count(cin: int, cout: int, k: int = 1) -> int:
        return cout * cin * k * k + 2 * cout

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ShapeError(f"ConvBlock expects {self.cin} channels, got {x.shape[1]}")
        y = conv2d(x, self.weight, None, stride=self.s, padding=self.k // 2)
        if self.training:
            y, mean, var = batch_norm(y, self.gamma, self.beta, BN_EPS)
            n = y.shape[0] * y.shape[2] * y.shape[3]
            unbiased = var * n / (n - 1) if n > 1 else var
            self.running_mean = ((1 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * mean).astype(y.dtype)
            self.running_var = ((1 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * unbiased).astype(y.dtype)
        else:
            stats = (self.running_mean, self.running_var)
            y, _, _ = batch_norm(y, self.gamma, self.beta, BN_EPS, stats=stats)
        return silu(y) if self.act else y


class Bottleneck(Module):
    def __init__(self, c1: int, c2: int, shortcut: bool = True, *, rng: np.random.Generator):
        super().__init__()
        self.cv1 = ConvBlock(c1, c2, 1, rng=rng)
        self.cv2 = ConvBlock(c2, c2, 3, rng=rng)
        self.add = shortcut and c1 == c2

    @staticmethod
    def param_count(c1: int, c2: int) -> int:
        return ConvBlock.param_count(c1, c2, 1) + ConvBlock.param_count(c2, c2, 3)

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class MhsaBlock(Module):
    """Multi-head self-attention over the H*W spatial tokens of a (B,C,H,W) map.

    No positional encoding, so the block is equivariant to token permutations.
    """

    def __init__(self, channels: int, heads: int, residual: bool = True, *, rng: np.random.Generator):
        super().__init__()
        if channels % heads:
            raise ShapeError(f"embedding dim {channels} is not divisible by {heads} heads")
        self.channels, self.heads, self.residual = channels, heads, residual
        self.wq = kaiming_uniform((channels, channels), channels, rng)
        self.bq = zeros_parameter((channels,))
        self.wk = kaiming_uniform((channels, channels), channels, rng)
        self.bk = zeros_parameter((channels,))
        self.wv = kaiming_uniform((channels, channels), channels, rng)
        self.bv = zeros_parameter((channels,))
        self.wo = kaiming_uniform((channels, channels), channels, rng)
        self.bo = zeros_parameter((channels,))

    @staticmethod
    def param_count(channels: int) -> int:
        return 4 * (channels * channels + channels)

    def _split_heads(self, t: Tensor) -> Tensor:
        b, n, c = t.shape
        return t.reshape(b, n, self.heads, c // self.heads).transpose(0, 2, 1, 3)

    def _attend(self, x: Tensor) -> tuple[Tensor, Tensor]:
        b, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"MhsaBlock expects {self.channels} channels, got {c}")
        tokens = x.reshape(b, c, h * w).transpose(0, 2, 1)
        q = self._split_heads(matmul(tokens, self.wq) + self.bq)
        k = self._split_heads(matmul(tokens, self.wk) + self.bk)
        v = self._split_heads(matmul(tokens, self.wv) + self.bv)
        scale = 1.0 / math.sqrt(c // self.heads)
        attn = softmax(matmul(q, k.transpose(0, 1, 3, 2)) * scale, axis=-1)
        mixed = matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, h * w, c)
        out = matmul(mixed, self.wo) + self.bo
        if self.residual:
            out = out + tokens
        return out.transpose(0, 2, 1).reshape(b, c, h, w), attn

    def attention_weights(self, x: Tensor) -> np.ndarray:
        """(B, heads, N, N) attention rows for diagnostics."""
        return self._attend(x)[1].data

    def forward(self, x: Tensor) -> Tensor:
        return self._attend(x)[0]


class CspStage(Module):
    """CSP stage: two 1x1 split branches, a bottleneck stack (or one MhsaBlock) on the first, 1x1 merge."""

    def __init__(
        self,
        cin: int,
        cout: int,
        n: int = 1,
        shortcut: bool = True,
        *,
        rng: np.random.Generator,
        attention_heads: int = 0,
    ):
        super().__init__()
        hidden = cout // 2
        self.cin, self.cout = cin, cout
        self.cv1 = ConvBlock(cin, hidden, 1, rng=rng)
        self.cv2 = ConvBlock(cin, hidden, 1, rng=rng)
        self.cv3 = ConvBlock(2 * hidden, cout, 1, rng=rng)
        if attention_heads:
            self.m: list[Module] = [MhsaBlock(hidden, attention_heads, rng=rng)]
        else:
            self.m = [Bottleneck(hidden, hidden, shortcut, rng=rng) for _ in range(n)]

    @staticmethod
    def param_count(cin: int, cout: int, n: int, attention: bool = False) -> int:
        hidden = cout // 2
        total = 2 * ConvBlock.param_count(cin, hidden, 1) + ConvBlock.param_count(2 * hidden, cout, 1)
        if attention:
            return total + MhsaBlock.param_count(hidden)
        return total + n * Bottleneck.param_count(hidden, hidden)

    def forward(self, x: Tensor) -> Tensor:
        y = self.cv1(x)
        for block in self.m:
            y = block(y)
        return self.cv3(concat([y, self.cv2(x)], axis=1))


class Sppf(Module):
    """Fast spatial pyramid pooling.

    The input and three chained k x k stride-1 max-pools are concatenated and merged by a 1x1 conv.
    """

    def __init__(self, cin: int, cout: int, k: int = 5, *, rng: np.random.Generator):
        super().__init__()
        hidden = cin // 2
        self.k = k
        self.cv1 = ConvBlock(cin, hidden, 1, rng=rng)
        self.cv2 = ConvBlock(4 * hidden, cout, 1, rng=rng)

    @staticmethod
    def param_count(cin: int, cout: int) -> int:
        hidden = cin // 2
        return ConvBlock.param_count(cin, hidden, 1) + ConvBlock.param_count(4 * hidden, cout, 1)

    def pyramid(self, x: Tensor) -> Tensor:
        y = self.cv1(x)
        branches = [y]
        for _ in range(3):
            branches.append(max_pool2d(branches[-1], self.k, stride=1, padding=self.k // 2))
        return concat(branches, axis=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.cv2(self.pyramid(x))
