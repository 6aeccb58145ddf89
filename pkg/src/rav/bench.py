"""Latency benchmarking: warmed-up wall-clock statistics for single ops."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation


@dataclass
class BenchReport:
    op_id: str
    mean_s: float
    median_s: float
    p95_s: float
    std_s: float
    cv: float
    n_warmup: int
    n_timed: int
    raw_s: list
    environment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.p95_s < self.median_s:
            raise ContractViolation("p95 must be >= median")
        if self.cv < 0:
            raise ContractViolation("cv must be >= 0")

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=1)


def bench(op_id: str, fn, warmup_iters: int = 5, timed_iters: int = 50,
          environment: dict | None = None) -> BenchReport:
    """Times `fn()` wall-clock after warmup; absolute values are
    hardware-dependent and recorded, never compared to reference numbers."""
    if warmup_iters < 1:
        raise ContractViolation("warmup_iters must be >= 1")
    if timed_iters < 10:
        raise ContractViolation("timed_iters must be >= 10")
    for _ in range(warmup_iters):
        fn()
    raw = []
    for _ in range(timed_iters):
        t0 = time.perf_counter()
        fn()
        raw.append(time.perf_counter() - t0)
    arr = np.asarray(raw)
    mean = float(arr.mean())
    std = float(arr.std())
    return BenchReport(
        op_id=op_id, mean_s=mean, median_s=float(np.median(arr)),
        p95_s=float(np.percentile(arr, 95)), std_s=std,
        cv=std / mean if mean > 0 else 0.0,
        n_warmup=warmup_iters, n_timed=timed_iters, raw_s=raw,
        environment=environment or {})


def environment_noise_cv(reps: int = 50, work: int = 1_000_000) -> float:
    """Flaky-environment guard: cv of timing a fixed pure-Python busy loop.

    The loop does identical work every rep, so on quiet hardware its timings
    are tight (cv well under 0.10). A high value means the host itself
    (scheduler preemption, hypervisor steal, frequency scaling) injects
    timing noise that no benchmarked op can stay under, and latency cv
    bounds should be read against this baseline.
    """

    def spin():
        acc = 0.0
        for i in range(work):
            acc += i * 1e-9
        return acc

    spin()
    raw = []
    for _ in range(reps):
        t0 = time.perf_counter()
        spin()
        raw.append(time.perf_counter() - t0)
    arr = np.asarray(raw)
    return float(arr.std() / arr.mean()) if arr.mean() > 0 else 0.0
