"""Central finite-difference checks of every backward rule, the composite blocks, FSA and the loss terms.

Each case builds a scalar from random float64 inputs (non-scalar results are reduced with a fixed
random weighting so no gradient cancels by symmetry) and compares the analytic gradient of every
input with the numerical one.

The default step is 1e-6 rather than the textbook 1e-3. Under float64 its truncation error is far
below the tolerance, and it stays inside the selection gaps of the max-pool, min and max inputs
that SPPF and CIoU receive from random convolutions, which cannot be spaced apart the way the
single-op cases are. Smooth cases pass at either step. The error of one input is the largest
absolute difference divided by the largest gradient magnitude of that input (floored at
GRAD_FLOOR), so entries whose true gradient is near zero do not turn rounding noise into failures.
"""

import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from src import tensor as T
from src.blocks import Bottleneck
from src.blocks import ConvBlock
from src.blocks import CspStage
from src.blocks import MhsaBlock
from src.blocks import Sppf
from src.dataset import GroundTruth
from src.fsa import FsaModule
from src.hyper import Hyper
from src.loss import compute_loss
from src.model_config import DEFAULT_ANCHORS
from src.model_config import ModelConfig
from src.observability import get_logger
from src.observability import metrics
from src.tensor import Tensor
from src.tensor import backward
from src.tensor import default_dtype
from src.tensor import no_grad

logger = get_logger(__name__)

STEP = 1e-6
TOLERANCE = 1e-3
GRAD_FLOOR = 1e-6

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
CASES: dict[str, Case] = {}


def case(name: str) -> Callable[[Case], Case]:
    def register(fn: Case) -> Case:
        CASES[name] = fn
        return fn

    return register


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_rel_error: float
    passed: bool
    seconds: float

    def to_line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{status:4} {self.name:28} rel_err={self.max_rel_error:.2e} ({self.seconds:.2f}s)"


def numerical_gradient(f: Callable[[], float], array: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of `f` with respect to `array`, perturbed in place and restored."""
    grad = np.zeros_like(array)
    flat, flat_grad = array.reshape(-1), grad.reshape(-1)
    if not np.shares_memory(flat, array):
        raise ValueError("numerical_gradient needs a contiguous array")
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = f()
        flat[i] = original - step
        minus = f()
        flat[i] = original
        flat_grad[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), GRAD_FLOOR)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(
    name: str,
    loss_fn: Callable[[], Tensor],
    tensors: list[Tensor],
    step: float = STEP,
    tolerance: float = TOLERANCE,
) -> GradCheckResult:
    start = time.perf_counter()
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def value() -> float:
        with no_grad():
            return loss_fn().item()

    worst = 0.0
    for t, grad in zip(tensors, analytic):
        worst = max(worst, relative_error(grad, numerical_gradient(value, t.data, step)))
    return GradCheckResult(name, worst, worst < tolerance, time.perf_counter() - start)


def _input(rng: np.random.Generator, *shape: int, low: float | None = None) -> Tensor:
    data = rng.normal(size=shape) if low is None else rng.uniform(low, low + 1.5, size=shape)
    return Tensor(np.ascontiguousarray(data, dtype=np.float64), requires_grad=True)


def _separated(rng: np.random.Generator, *shape: int) -> Tensor:
    """Values at least 0.1 apart, so max-style selections never flip under perturbation."""
    data = rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1 - 1.0
    return Tensor(np.ascontiguousarray(data, dtype=np.float64), requires_grad=True)


def _reduce(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.normal(size=out.shape))
    return lambda y: T.tensor_sum(y * weights)


def _scalar_case(fn: Callable[..., Tensor], *inputs: Tensor, rng: np.random.Generator):
    reduce = _reduce(fn(*inputs), rng)
    return (lambda: reduce(fn(*inputs))), list(inputs)


def _module_case(module, x: Tensor, rng: np.random.Generator):
    reduce = _reduce(module(x), rng)
    return (lambda: reduce(module(x))), [x, *module.parameters()]


def _randomize(module, rng: np.random.Generator, scale: float = 0.5) -> None:
    for p in module.parameters():
        p.data = np.ascontiguousarray(rng.normal(scale=scale, size=p.shape))


@case("add-broadcast")
def _add_broadcast(rng):
    return _scalar_case(lambda a, b: a + b, _input(rng, 2, 3, 4), _input(rng, 1, 3, 1), rng=rng)


@case("sub")
def _sub(rng):
    return _scalar_case(lambda a, b: a - b, _input(rng, 2, 3), _input(rng, 2, 3), rng=rng)


@case("mul-broadcast")
def _mul_broadcast(rng):
    return _scalar_case(lambda a, b: a * b, _input(rng, 2, 4, 3), _input(rng, 4, 1), rng=rng)


@case("div")
def _div(rng):
    return _scalar_case(lambda a, b: a / b, _input(rng, 3, 4), _input(rng, 3, 4, low=0.5), rng=rng)


@case("neg-pow")
def _neg_pow(rng):
    return _scalar_case(lambda a: -(a**2.5), _input(rng, 3, 4, low=0.5), rng=rng)


@case("exp-log")
def _exp_log(rng):
    return _scalar_case(
        lambda a, b: T.exp(a) + T.log(b), _input(rng, 3, 3), _input(rng, 3, 3, low=0.5), rng=rng
    )


@case("sigmoid-silu-atan")
def _sigmoid_silu_atan(rng):
    return _scalar_case(lambda a: T.sigmoid(a) + T.silu(a) * T.atan(a), _input(rng, 4, 5), rng=rng)


@case("maximum-minimum")
def _maximum_minimum(rng):
    a, b = _separated(rng, 2, 6), _input(rng, 2, 6)
    b.data = a.data + np.where(rng.random(a.shape) < 0.5, 0.05, -0.05)
    return _scalar_case(lambda x, y: T.maximum(x, y) * 2 + T.minimum(x, y), a, b, rng=rng)


@case("clamp-min")
def _clamp_min(rng):
    return _scalar_case(lambda a: T.clamp_min(a, 0.05), _separated(rng, 3, 4), rng=rng)


@case("bce-with-logits")
def _bce_with_logits(rng):
    targets = rng.uniform(size=(3, 5))
    return _scalar_case(lambda a: T.bce_with_logits(a, targets), _input(rng, 3, 5), rng=rng)


@case("sum-mean")
def _sum_mean(rng):
    return _scalar_case(
        lambda a: T.tensor_sum(a, axis=1) + T.tensor_mean(a, axis=(1, 2), keepdims=True)[:, 0],
        _input(rng, 2, 3, 4),
        rng=rng,
    )


@case("reshape-transpose-index")
def _reshape_transpose_index(rng):
    index = (np.array([0, 1, 1]), slice(None), np.array([2, 0, 2]))
    return _scalar_case(lambda a: a.transpose(2, 0, 1).reshape(4, 2, 3)[index], _input(rng, 2, 3, 4), rng=rng)


@case("concat-broadcast-upsample")
def _concat_broadcast_upsample(rng):
    def fn(a, b):
        return T.upsample_nearest(T.concat([a, T.broadcast_to(b, a.shape)], axis=1))

    return _scalar_case(fn, _input(rng, 1, 2, 3, 3), _input(rng, 1, 1, 3, 1), rng=rng)


@case("matmul-softmax")
def _matmul_softmax(rng):
    return _scalar_case(
        lambda a, b: T.softmax(a @ b, axis=-1), _input(rng, 2, 3, 4), _input(rng, 4, 5), rng=rng
    )


@case("conv2d-stride1-pad1")
def _conv2d_stride1_pad1(rng):
    return _scalar_case(
        lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1),
        _input(rng, 2, 3, 5, 5),
        _input(rng, 4, 3, 3, 3),
        _input(rng, 4),
        rng=rng,
    )


@case("conv2d-stride2")
def _conv2d_stride2(rng):
    return _scalar_case(
        lambda x, w: T.conv2d(x, w, stride=2, padding=1),
        _input(rng, 1, 2, 6, 6),
        _input(rng, 3, 2, 3, 3),
        rng=rng,
    )


@case("max-pool2d")
def _max_pool2d(rng):
    return _scalar_case(
        lambda x: T.max_pool2d(x, 3, stride=1, padding=1), _separated(rng, 1, 2, 5, 5), rng=rng
    )


@case("pool-axis")
def _pool_axis(rng):
    def fn(x):
        total = T.tensor_sum(T.pool_axis(x, "H", "mean") * 1.5)
        total = total + T.tensor_sum(T.pool_axis(x, "W", "max"))
        return total + T.tensor_sum(T.pool_axis(x, "C", "mean") * T.pool_axis(x, "C", "max"))

    return _scalar_case(fn, _separated(rng, 2, 3, 4, 5), rng=rng)


@case("batch-norm")
def _batch_norm(rng):
    stats = (rng.normal(size=3), rng.uniform(0.5, 1.5, size=3))

    def fn(x, g, b):
        return T.batch_norm(x, g, b, 1e-3)[0] + T.batch_norm(x, g, b, 1e-3, stats=stats)[0]

    return _scalar_case(fn, _input(rng, 2, 3, 4, 4), _input(rng, 3, low=0.5), _input(rng, 3), rng=rng)


@case("conv-block")
def _conv_block(rng):
    return _module_case(ConvBlock(3, 4, 3, 2, rng=rng), _input(rng, 2, 3, 6, 6), rng)


@case("bottleneck")
def _bottleneck(rng):
    return _module_case(Bottleneck(4, 4, rng=rng), _input(rng, 2, 4, 4, 4), rng)


@case("csp-stage")
def _csp_stage(rng):
    return _module_case(CspStage(4, 4, 1, rng=rng), _input(rng, 2, 4, 4, 4), rng)


@case("sppf")
def _sppf(rng):
    return _module_case(Sppf(4, 4, rng=rng), _input(rng, 1, 4, 3, 3), rng)


@case("mhsa-block")
def _mhsa_block(rng):
    return _module_case(MhsaBlock(4, 2, rng=rng), _input(rng, 1, 4, 3, 3), rng)


@case("fsa-module")
def _fsa_module(rng):
    module = FsaModule(4, r=2, k=3, rng=rng)
    _randomize(module, rng)
    return _module_case(module, _input(rng, 2, 4, 5, 6), rng)


def _loss_case(rng: np.random.Generator, gains: dict[str, float]):
    config = ModelConfig(
        input_size=32, num_classes=2, strides=(8, 16, 32), anchors=DEFAULT_ANCHORS[1:]
    ).validate()
    outputs = [_input(rng, 1, config.head_channels, g, g) for g in config.grid_sizes()]
    gts = [[GroundTruth(0, 0.31, 0.42, 0.45, 0.5), GroundTruth(1, 0.7, 0.62, 0.35, 0.6)]]
    hyper = Hyper(**gains)
    frozen = compute_loss(outputs, gts, config, hyper).detached
    return (lambda: compute_loss(outputs, gts, config, hyper, detached=frozen).total), outputs


@case("loss-box")
def _loss_box(rng):
    return _loss_case(rng, {"box_gain": 1.0, "obj_gain": 0.0, "cls_gain": 0.0})


@case("loss-objectness")
def _loss_objectness(rng):
    return _loss_case(rng, {"box_gain": 0.0, "obj_gain": 1.0, "cls_gain": 0.0})


@case("loss-class")
def _loss_class(rng):
    return _loss_case(rng, {"box_gain": 0.0, "obj_gain": 0.0, "cls_gain": 1.0})


@case("loss-total")
def _loss_total(rng):
    return _loss_case(rng, {})


def run_suite(
    seed: int = 0, names: list[str] | None = None, step: float = STEP
) -> list[GradCheckResult]:
    """Run the registered cases (all by default) in float64."""
    selected = names or list(CASES)
    unknown = sorted(set(selected) - set(CASES))
    if unknown:
        raise KeyError(f"unknown gradcheck cases: {unknown}")
    results = []
    with default_dtype("float64"):
        order = list(CASES)
        for name in selected:
            rng = np.random.default_rng([seed, order.index(name)])
            loss_fn, tensors = CASES[name](rng)
            result = check_gradients(name, loss_fn, tensors, step=step)
            logger.debug(f"[gradcheck] {result.to_line()}")
            results.append(result)
    failed = [r.name for r in results if not r.passed]
    metrics.gauge("gradcheck.failed", len(failed))
    if failed:
        logger.warning(f"[gradcheck] {len(failed)} of {len(results)} cases failed: {failed}")
    else:
        logger.info(f"[gradcheck] all {len(results)} cases passed")
    return results
