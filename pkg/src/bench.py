"""Forward latency benchmark with a per-section breakdown."""

import statistics
import time
from dataclasses import dataclass

import numpy as np

from src.model import Detector
from src.observability import get_logger
from src.observability import metrics
from src.tensor import Tensor
from src.tensor import no_grad

logger = get_logger(__name__)


@dataclass(frozen=True)
class BenchReport:
    iters: int
    batch_size: int
    median_ms: float
    min_ms: float
    sections_ms: dict[str, float]  # median per forward section
    num_parameters: int

    def to_text(self) -> str:
        lines = [
            f"iters = {self.iters}",
            f"batch_size = {self.batch_size}",
            f"parameters = {self.num_parameters}",
            f"median_forward_ms = {self.median_ms:.2f}",
            f"min_forward_ms = {self.min_ms:.2f}",
        ]
        lines += [f"{name}_ms = {ms:.2f}" for name, ms in self.sections_ms.items()]
        return "\n".join(lines) + "\n"


def benchmark(
    model: Detector, iters: int = 10, batch_size: int = 1, warmup: int = 1, seed: int = 0
) -> BenchReport:
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    size = model.config.input_size
    rng = np.random.default_rng(seed)
    images = Tensor(rng.uniform(size=(batch_size, 3, size, size)))
    model.eval()
    totals: list[float] = []
    sections: dict[str, list[float]] = {}
    with no_grad():
        for _ in range(warmup):
            model(images)
        for _ in range(iters):
            timings: dict[str, float] = {}
            start = time.perf_counter()
            model(images, timings=timings)
            totals.append((time.perf_counter() - start) * 1000)
            for name, seconds in timings.items():
                sections.setdefault(name, []).append(seconds * 1000)
    report = BenchReport(
        iters=iters,
        batch_size=batch_size,
        median_ms=statistics.median(totals),
        min_ms=min(totals),
        sections_ms={name: statistics.median(values) for name, values in sections.items()},
        num_parameters=model.num_parameters(),
    )
    metrics.timing("bench.forward_ms", report.median_ms)
    logger.info(f"[benchmark] median forward {report.median_ms:.1f}ms over {iters} iters")
    return report
