"""Timing of the fused multi-scale path against dense dilated correlation."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import kernel_engine as ke

__all__ = ["BenchRow", "parse_scale_sets", "run_bench", "write_bench_csv", "BENCH_HEADER"]

BENCH_HEADER = ["h", "w", "scales", "naive_ms", "fast_ms", "speedup", "max_abs_diff"]


@dataclass
class BenchRow:
    h: int
    w: int
    scales: tuple
    naive_ms: float
    fast_ms: float
    max_abs_diff: float

    @property
    def speedup(self) -> float:
        return self.naive_ms / self.fast_ms if self.fast_ms > 0 else float("inf")


def parse_scale_sets(text: str) -> list:
    """``"1,2,4;1,2,16"`` -> ``[(1, 2, 4), (1, 2, 16)]``."""
    sets = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if chunk:
            sets.append(ke.check_scales(tuple(int(v) for v in chunk.split(","))))
    if not sets:
        raise ValueError("no scale sets given")
    return sets


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, (time.perf_counter() - t0) * 1e3


def run_bench(sizes, scale_sets, reps: int = 3, seed: int = 0, channels: int = 3) -> list:
    """Median wall time over ``reps`` for each (size, scale set) pair.

    The fast timing includes gathering the sampled tensor.  Every repetition
    also records the largest absolute disagreement between the two paths.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    rng = np.random.default_rng(seed)
    rows = []
    for h, w in sizes:
        img = rng.random((h, w, channels)).astype(np.float32)
        K = rng.normal(0.0, 0.3, (h, w, 9)).astype(np.float32)
        for scales in scale_sets:
            alpha = ke.softmax_fusion(rng.normal(size=(h, w, len(scales))).astype(np.float32))
            naive_t, fast_t, diff = [], [], 0.0
            for _ in range(reps):
                fast, tf = _timed(lambda: ke.apply_multiscale_fast(ke.gather_samples(img, scales), K, alpha))
                naive, tn = _timed(lambda: ke.apply_multiscale_naive(img, K, scales, alpha))
                fast_t.append(tf)
                naive_t.append(tn)
                diff = max(diff, float(np.max(np.abs(fast.astype(np.float64) - naive))))
            rows.append(BenchRow(h, w, tuple(scales), statistics.median(naive_t),
                                 statistics.median(fast_t), diff))
    return rows


def write_bench_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(BENCH_HEADER)
        for r in rows:
            wr.writerow([r.h, r.w, ",".join(str(s) for s in r.scales), f"{r.naive_ms:.3f}",
                         f"{r.fast_ms:.3f}", f"{r.speedup:.3f}", f"{r.max_abs_diff:.3e}"])
