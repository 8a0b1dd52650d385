"""Latency harness: warm-up, then timed repetitions on a fixed seeded batch."""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field

from threadpoolctl import threadpool_limits

from .model import ModelGraph, forward, sample_inputs


@dataclass
class BenchResult:
    model: str
    form: str
    runs: int
    warmup: int
    batch: int
    threads: int
    latencies_us: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")

    @property
    def mean(self) -> float:
        return statistics.fmean(self.latencies_us)

    @property
    def std(self) -> float:
        return statistics.pstdev(self.latencies_us) if len(self.latencies_us) > 1 else 0.0

    @property
    def median(self) -> float:
        return statistics.median(self.latencies_us)

    def summary(self) -> str:
        return (f"{self.model} {self.form} batch={self.batch} threads={self.threads}: "
                f"mean {self.mean / 1e3:.2f} ms, std {self.std / 1e3:.2f} ms, "
                f"median {self.median / 1e3:.2f} ms over {self.runs} runs ({self.warmup} warm-up)")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["model", "form", "batch", "threads", "run", "latency_us"])
        for i, t in enumerate(self.latencies_us):
            w.writerow([self.model, self.form, self.batch, self.threads, i, f"{t:.3f}"])
        for stat in ("mean", "std", "median"):
            w.writerow([self.model, self.form, self.batch, self.threads, stat, f"{getattr(self, stat):.3f}"])
        return buf.getvalue()


def run_bench(g: ModelGraph, runs: int = 100, warmup: int = 10, batch: int = 1,
              threads: int = 1, seed: int = 0) -> BenchResult:
    """Time ``forward`` with BLAS pinned to ``threads``; warm-up runs are discarded."""
    result = BenchResult(g.config.label, g.form.value, runs, warmup, batch, threads)
    x = sample_inputs(batch, g.config, seed=seed, dtype=g.dtype)
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            forward(g, x)
        for _ in range(runs):
            t0 = time.perf_counter_ns()
            forward(g, x)
            result.latencies_us.append((time.perf_counter_ns() - t0) / 1e3)
    return result
