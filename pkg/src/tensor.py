"""Dense float tensors with reverse-mode autodiff over numpy buffers.

Activations are laid out (batch, channel, height, width), row-major. Each op computes its result
eagerly; when grad mode is on and any input requires grad, the result carries a BackwardRecord
naming the op, its parents, and whatever the op's backward rule needs. Rules live in a registry
keyed by OpKind so every recorded op is guaranteed to have one.
"""

from __future__ import annotations

import enum
import threading
from collections.abc import Callable
from collections.abc import Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from dataclasses import field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.config import DTYPE


class ShapeError(ValueError):
    """Raised when operand extents are incompatible with an op."""


class NumericError(ArithmeticError):
    """Raised when an op receives or produces NaN/Inf."""


class ContractError(ValueError):
    """Raised when an op is called outside its preconditions."""


_state = threading.local()

# Axis names used by pool_axis on (B, C, H, W) activations.
AXES = {"C": 1, "H": 2, "W": 3}


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(DTYPE))


@contextmanager
def default_dtype(dtype: str | np.dtype):
    """Create tensors (and parameters) in `dtype` within the block, on this thread."""
    previous = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Suppress lineage construction on this thread (inference)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class OpKind(enum.Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    NEG = "neg"
    POW = "pow"
    EXP = "exp"
    LOG = "log"
    SIGMOID = "sigmoid"
    SILU = "silu"
    ATAN = "atan"
    MAXIMUM = "maximum"
    MINIMUM = "minimum"
    CLAMP_MIN = "clamp_min"
    SUM = "sum"
    MEAN = "mean"
    RESHAPE = "reshape"
    TRANSPOSE = "transpose"
    INDEX = "index"
    CONCAT = "concat"
    BROADCAST = "broadcast_to"
    UPSAMPLE = "upsample_nearest"
    MATMUL = "matmul"
    SOFTMAX = "softmax"
    CONV2D = "conv2d"
    MAX_POOL2D = "max_pool2d"
    POOL_AXIS = "pool_axis"
    BATCH_NORM = "batch_norm"
    BCE_LOGITS = "bce_with_logits"


@dataclass(eq=False)
class BackwardRecord:
    op_kind: OpKind
    inputs: tuple[Tensor, ...]
    saved: dict[str, Any] = field(default_factory=dict)


Rule = Callable[[BackwardRecord, np.ndarray], tuple[np.ndarray | None, ...]]
_RULES: dict[OpKind, Rule] = {}


def backward_rule(kind: OpKind) -> Callable[[Rule], Rule]:
    def register(fn: Rule) -> Rule:
        _RULES[kind] = fn
        return fn

    return register


class Tensor:
    """A float array with an optional gradient slot and autodiff lineage."""

    __array_ufunc__ = None  # numpy defers binary ops to the Tensor dunders

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: str | np.dtype | None = None,
        name: str | None = None,
    ):
        if dtype is None and isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            array = data
        else:
            array = np.asarray(data, dtype=dtype or get_default_dtype())
        if any(extent < 1 for extent in array.shape):
            raise ShapeError(f"extents must be positive, got {array.shape}")
        self.data: np.ndarray = array
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.lineage: BackwardRecord | None = None
        self.name = name
        self._retain_grad = False

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def retain_grad(self) -> Tensor:
        """Keep the accumulated gradient of this interior tensor after backward."""
        self._retain_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(_lift(other, self), self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(_lift(other, self), self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(_lift(other, self), self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        return div(_lift(other, self), self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return getitem(self, index)

    def reshape(self, *shape: int) -> Tensor:
        target = shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape
        return reshape(self, tuple(target))

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return tensor_mean(self, axis, keepdims)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def silu(self) -> Tensor:
        return silu(self)

    def exp(self) -> Tensor:
        return exp(self)


def _lift(value: Any, like: Tensor) -> Tensor:
    """Wrap constants in a non-differentiable tensor of `like`'s dtype."""
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _emit(kind: OpKind, values: np.ndarray, inputs: Sequence[Tensor], /, **saved: Any) -> Tensor:
    if not np.isfinite(values).all():
        raise NumericError(f"{kind.value} produced non-finite values")
    result = Tensor(np.asarray(values))
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.lineage = BackwardRecord(kind, tuple(inputs), saved)
    return result


def _require_finite(x: Tensor, op: str) -> None:
    if not np.isfinite(x.data).all():
        raise NumericError(f"{op} received non-finite input")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes broadcasting added or stretched to reach its shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --- elementwise ------------------------------------------------------------------------------


def add(a: Tensor, b: Any) -> Tensor:
    b = _lift(b, a)
    _broadcast_shapes(a, b, "add")
    return _emit(OpKind.ADD, a.data + b.data, (a, b))


@backward_rule(OpKind.ADD)
def _add_backward(record: BackwardRecord, g: np.ndarray):
    a, b = record.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a: Tensor, b: Any) -> Tensor:
    b = _lift(b, a)
    _broadcast_shapes(a, b, "sub")
    return _emit(OpKind.SUB, a.data - b.data, (a, b))


@backward_rule(OpKind.SUB)
def _sub_backward(record: BackwardRecord, g: np.ndarray):
    a, b = record.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a: Tensor, b: Any) -> Tensor:
    b = _lift(b, a)
    _broadcast_shapes(a, b, "mul")
    return _emit(OpKind.MUL, a.data * b.data, (a, b))


@backward_rule(OpKind.MUL)
def _mul_backward(record: BackwardRecord, g: np.ndarray):
    a, b = record.inputs
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def div(a: Tensor, b: Any) -> Tensor:
    b = _lift(b, a)
    _broadcast_shapes(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _emit(OpKind.DIV, out, (a, b))


@backward_rule(OpKind.DIV)
def _div_backward(record: BackwardRecord, g: np.ndarray):
    a, b = record.inputs
    ga = g / b.data
    gb = -g * a.data / (b.data * b.data)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def neg(x: Tensor) -> Tensor:
    return _emit(OpKind.NEG, -x.data, (x,))


@backward_rule(OpKind.NEG)
def _neg_backward(record: BackwardRecord, g: np.ndarray):
    return (-g,)


def power(x: Tensor, exponent: float) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(x.data, exponent)
    return _emit(OpKind.POW, out, (x,), exponent=float(exponent))


@backward_rule(OpKind.POW)
def _pow_backward(record: BackwardRecord, g: np.ndarray):
    (x,) = record.inputs
    p = record.saved["exponent"]
    return (g * p * np.power(x.data, p - 1),)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit(OpKind.EXP, out, (x,), out=out)


@backward_rule(OpKind.EXP)
def _exp_backward(record: BackwardRecord, g: np.ndarray):
    return (g * record.saved["out"],)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _emit(OpKind.LOG, out, (x,))


@backward_rule(OpKind.LOG)
def _log_backward(record: BackwardRecord, g: np.ndarray):
    (x,) = record.inputs
    return (g / x.data,)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _emit(OpKind.SIGMOID, out, (x,), out=out)


@backward_rule(OpKind.SIGMOID)
def _sigmoid_backward(record: BackwardRecord, g: np.ndarray):
    s = record.saved["out"]
    return (g * s * (1.0 - s),)


def silu(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return _emit(OpKind.SILU, x.data * s, (x,), sig=s)


@backward_rule(OpKind.SILU)
def _silu_backward(record: BackwardRecord, g: np.ndarray):
    (x,) = record.inputs
    s = record.saved["sig"]
    return (g * s * (1.0 + x.data * (1.0 - s)),)


def atan(x: Tensor) -> Tensor:
    return _emit(OpKind.ATAN, np.arctan(x.data), (x,))


@backward_rule(OpKind.ATAN)
def _atan_backward(record: BackwardRecord, g: np.ndarray):
    (x,) = record.inputs
    return (g / (1.0 + x.data * x.data),)


def maximum(a: Tensor, b: Any) -> Tensor:
    b = _lift(b, a)
    _broadcast_shapes(a, b, "maximum")
    return _emit(OpKind.MAXIMUM, np.maximum(a.data, b.data), (a, b))


@backward_rule(OpKind.MAXIMUM)
def _maximum_backward(record: BackwardRecord, g: np.ndarray):
    a, b = record.inputs
    first = a.data >= b.data  # ties route to the first operand
    return _unbroadcast(g * first, a.shape), _unbroadcast(g * ~first, b.shape)


def minimum(a: Tensor, b: Any) -> Tensor:
    b = _lift(b, a)
    _broadcast_shapes(a, b, "minimum")
    return _emit(OpKind.MINIMUM, np.minimum(a.data, b.data), (a, b))


@backward_rule(OpKind.MINIMUM)
def _minimum_backward(record: BackwardRecord, g: np.ndarray):
    a, b = record.inputs
    first = a.data <= b.data
    return _unbroadcast(g * first, a.shape), _unbroadcast(g * ~first, b.shape)


def clamp_min(x: Tensor, lower: float) -> Tensor:
    return _emit(OpKind.CLAMP_MIN, np.maximum(x.data, lower), (x,), lower=lower)


@backward_rule(OpKind.CLAMP_MIN)
def _clamp_min_backward(record: BackwardRecord, g: np.ndarray):
    (x,) = record.inputs
    return (g * (x.data >= record.saved["lower"]),)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits: max(x,0) - x*z + log(1 + exp(-|x|))."""
    z = np.asarray(targets, dtype=logits.dtype)
    if z.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {z.shape} vs logits {logits.shape}")
    x = logits.data
    out = np.maximum(x, 0) - x * z + np.log1p(np.exp(-np.abs(x)))
    return _emit(OpKind.BCE_LOGITS, out, (logits,), targets=z)


@backward_rule(OpKind.BCE_LOGITS)
def _bce_backward(record: BackwardRecord, g: np.ndarray):
    (x,) = record.inputs
    return (g * (_stable_sigmoid(x.data) - record.saved["targets"]),)


# --- reductions and shape ops -----------------------------------------------------------------


def _normalize_axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


def tensor_sum(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _emit(OpKind.SUM, np.asarray(out, dtype=x.dtype), (x,), axes=axes, keepdims=keepdims)


@backward_rule(OpKind.SUM)
def _sum_backward(record: BackwardRecord, g: np.ndarray):
    (x,) = record.inputs
    if not record.saved["keepdims"]:
        g = np.expand_dims(g, record.saved["axes"])
    return (np.broadcast_to(g, x.shape),)


def tensor_mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.mean(axis=axes, keepdims=keepdims)
    count = int(np.prod([x.shape[a] for a in axes]))
    return _emit(OpKind.MEAN, np.asarray(out, dtype=x.dtype), (x,), axes=axes, keepdims=keepdims, count=count)


@backward_rule(OpKind.MEAN)
def _mean_backward(record: BackwardRecord, g: np.ndarray):
    (x,) = record.inputs
    if not record.saved["keepdims"]:
        g = np.expand_dims(g, record.saved["axes"])
    return (np.broadcast_to(g / record.saved["count"], x.shape),)


def mean_all(x: Tensor) -> Tensor:
    return tensor_mean(x, None, keepdims=False)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None
    return _emit(OpKind.RESHAPE, out, (x,))


@backward_rule(OpKind.RESHAPE)
def _reshape_backward(record: BackwardRecord, g: np.ndarray):
    (x,) = record.inputs
    return (g.reshape(x.shape),)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose axes {axes} do not permute a {x.ndim}-D tensor")
    return _emit(OpKind.TRANSPOSE, x.data.transpose(axes), (x,), axes=axes)


@backward_rule(OpKind.TRANSPOSE)
def _transpose_backward(record: BackwardRecord, g: np.ndarray):
    return (g.transpose(np.argsort(record.saved["axes"])),)


def getitem(x: Tensor, index: Any) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back into the source."""
    try:
        out = np.array(x.data[index], dtype=x.dtype, copy=True)
    except IndexError as exc:
        raise ShapeError(f"index out of range for shape {x.shape}: {exc}") from None
    if out.size == 0:
        raise ShapeError(f"index selects no elements from shape {x.shape}")
    return _emit(OpKind.INDEX, out, (x,), index=index)


@backward_rule(OpKind.INDEX)
def _index_backward(record: BackwardRecord, g: np.ndarray):
    (x,) = record.inputs
    dx = np.zeros_like(x.data)
    selected_shape = x.data[record.saved["index"]].shape
    np.add.at(dx, record.saved["index"], g.reshape(selected_shape))
    return (dx,)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return getitem(x, tuple(index))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors:
        if t.ndim != ndim or any(t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != axis):
            raise ShapeError(f"concat on axis {axis}: {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    return _emit(OpKind.CONCAT, out, tuple(tensors), axis=axis, sizes=sizes)


@backward_rule(OpKind.CONCAT)
def _concat_backward(record: BackwardRecord, g: np.ndarray):
    offsets = np.cumsum(record.saved["sizes"])[:-1]
    return tuple(np.split(g, offsets, axis=record.saved["axis"]))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Replicate extent-1 axes of `x` up to `shape`; gradients sum over the copies."""
    shape = tuple(shape)
    if len(shape) != x.ndim or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}")
    return _emit(OpKind.BROADCAST, np.broadcast_to(x.data, shape), (x,))


@backward_rule(OpKind.BROADCAST)
def _broadcast_backward(record: BackwardRecord, g: np.ndarray):
    (x,) = record.inputs
    return (_unbroadcast(g, x.shape),)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest expects (B,C,H,W), got {x.shape}")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)
    return _emit(OpKind.UPSAMPLE, out, (x,), factor=factor)


@backward_rule(OpKind.UPSAMPLE)
def _upsample_backward(record: BackwardRecord, g: np.ndarray):
    (x,) = record.inputs
    f = record.saved["factor"]
    b, c, h, w = x.shape
    return (g.reshape(b, c, h, f, w, f).sum(axis=(3, 5)),)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None
    return _emit(OpKind.MATMUL, out, (a, b))


@backward_rule(OpKind.MATMUL)
def _matmul_backward(record: BackwardRecord, g: np.ndarray):
    a, b = record.inputs
    ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
    gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _emit(OpKind.SOFTMAX, out, (x,), out=out, axis=axis)


@backward_rule(OpKind.SOFTMAX)
def _softmax_backward(record: BackwardRecord, g: np.ndarray):
    y = record.saved["out"]
    axis = record.saved["axis"]
    return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


# --- spatial kernels --------------------------------------------------------------------------


def _windows(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(B, C, Ho, Wo, kh, kw) read-only view of the sliding windows."""
    return sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of (B,Cin,H,W) with (Cout,Cin,kh,kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    _, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride {stride} / padding {padding} out of range")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape}, expected ({cout},)")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: {kh}x{kw} kernel does not fit {h}x{w} input with padding {padding}")
    _require_finite(x, "conv2d")

    padded = x.data
    if padding:
        padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _windows(padded, kh, kw, stride)
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(
        OpKind.CONV2D,
        np.ascontiguousarray(out, dtype=x.dtype),
        inputs,
        padded=padded,
        stride=stride,
        padding=padding,
    )


@backward_rule(OpKind.CONV2D)
def _conv2d_backward(record: BackwardRecord, g: np.ndarray):
    x, weight = record.inputs[:2]
    padded = record.saved["padded"]
    stride = record.saved["stride"]
    padding = record.saved["padding"]
    _, _, kh, kw = weight.shape
    _, _, ho, wo = g.shape

    cols = _windows(padded, kh, kw, stride)
    dweight = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
    dcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (B, Ho, Wo, Cin, kh, kw)
    dpadded = np.zeros_like(padded)
    for i in range(kh):
        for j in range(kw):
            dpadded[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    h, w = x.shape[2:]
    dx = dpadded[:, :, padding : padding + h, padding : padding + w]
    grads: tuple[np.ndarray | None, ...] = (dx, dweight)
    if len(record.inputs) == 3:
        grads = grads + (g.sum(axis=(0, 2, 3)),)
    return grads


def max_pool2d(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Max pooling; backward routes each window's gradient to its lowest-index maximum."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects (B,C,H,W), got {x.shape}")
    if padding > kernel // 2:
        raise ContractError(f"max_pool2d: padding {padding} exceeds half the {kernel} kernel")
    padded = x.data
    if padding:
        pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
        padded = np.pad(x.data, pad, constant_values=-np.inf)
    win = _windows(padded, kernel, kernel, stride)
    b, c, ho, wo = win.shape[:4]
    flat = win.reshape(b, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return _emit(OpKind.MAX_POOL2D, out, (x,), arg=arg, kernel=kernel, stride=stride, padding=padding)


@backward_rule(OpKind.MAX_POOL2D)
def _max_pool_backward(record: BackwardRecord, g: np.ndarray):
    (x,) = record.inputs
    k, s, p = record.saved["kernel"], record.saved["stride"], record.saved["padding"]
    arg = record.saved["arg"]
    b, c, h, w = x.shape
    _, _, ho, wo = arg.shape
    rows = np.arange(ho)[None, None, :, None] * s + arg // k
    cols = np.arange(wo)[None, None, None, :] * s + arg % k
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    dpadded = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
    np.add.at(dpadded, (bi, ci, rows, cols), g)
    return (dpadded[:, :, p : p + h, p : p + w],)


def pool_axis(x: Tensor, axis: str, mode: str = "mean") -> Tensor:
    """Global pooling of a (B,C,H,W) tensor along one named axis, kept with extent 1."""
    if x.ndim != 4:
        raise ShapeError(f"pool_axis expects (B,C,H,W), got {x.shape}")
    if axis not in AXES:
        raise ContractError(f"pool_axis: axis must be one of {sorted(AXES)}, got {axis!r}")
    dim = AXES[axis]
    if mode == "mean":
        out = x.data.mean(axis=dim, keepdims=True)
        return _emit(OpKind.POOL_AXIS, out, (x,), dim=dim, mode=mode)
    if mode == "max":
        arg = np.expand_dims(x.data.argmax(axis=dim), dim)
        out = np.take_along_axis(x.data, arg, axis=dim)
        return _emit(OpKind.POOL_AXIS, out, (x,), dim=dim, mode=mode, arg=arg)
    raise ContractError(f"pool_axis: mode must be 'mean' or 'max', got {mode!r}")


@backward_rule(OpKind.POOL_AXIS)
def _pool_axis_backward(record: BackwardRecord, g: np.ndarray):
    (x,) = record.inputs
    dim = record.saved["dim"]
    if record.saved["mode"] == "mean":
        return (np.broadcast_to(g / x.shape[dim], x.shape),)
    dx = np.zeros_like(x.data)
    np.put_along_axis(dx, record.saved["arg"], g, axis=dim)
    return (dx,)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel normalization of (B,C,H,W).

    With `stats=None` the batch mean and (biased) variance are used and differentiated through;
    otherwise `stats` are treated as constants. Returns the output and the statistics used.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape}, scale {gamma.shape}, shift {beta.shape}")
    batch_stats = stats is None
    if batch_stats:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
    else:
        mean, var = stats
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    result = _emit(
        OpKind.BATCH_NORM,
        out.astype(x.dtype, copy=False),
        (x, gamma, beta),
        xhat=xhat,
        inv_std=inv_std,
        batch_stats=batch_stats,
    )
    return result, mean, var


@backward_rule(OpKind.BATCH_NORM)
def _batch_norm_backward(record: BackwardRecord, g: np.ndarray):
    _, gamma, _ = record.inputs
    xhat = record.saved["xhat"]
    inv_std = record.saved["inv_std"][None, :, None, None]
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    dxhat = g * gamma.data[None, :, None, None]
    if not record.saved["batch_stats"]:
        return dxhat * inv_std, dgamma, dbeta
    n = g.shape[0] * g.shape[2] * g.shape[3]
    dx = (
        inv_std
        / n
        * (
            n * dxhat
            - dxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
    )
    return dx, dgamma, dbeta


# --- reverse pass -----------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node.lineage is not None:
            for parent in node.lineage.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into `t.grad` for every leaf (and retained) tensor in the lineage."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor that requires grad")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.lineage is None or node._retain_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node.lineage is None:
            continue
        parent_grads = _RULES[node.lineage.op_kind](node.lineage, g)
        for parent, pg in zip(node.lineage.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(
                    f"{node.lineage.op_kind.value} backward produced {pg.shape} for input {parent.shape}"
                )
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg
