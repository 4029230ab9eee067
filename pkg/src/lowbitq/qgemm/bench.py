"""Kernel microbenchmark: time gemv_packed on a seeded random matrix."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass

import numpy as np

from ..bitpack import PackFormat, pack_codes, PackedMatrix, storage_size

CSV_COLUMNS = ("format", "rows", "cols", "threads", "reps", "ns_per_call", "bytes_per_second")


@dataclass
class BenchReport:
    format: PackFormat
    rows: int
    cols: int
    reps: int
    ns_per_call: float
    effective_bandwidth: float
    threads: int
    payload_bytes: int
    backend: str = ""

    def csv_row(self) -> dict:
        return {
            "format": self.format.label,
            "rows": self.rows,
            "cols": self.cols,
            "threads": self.threads,
            "reps": self.reps,
            "ns_per_call": f"{self.ns_per_call:.1f}",
            "bytes_per_second": f"{self.effective_bandwidth:.6g}",
        }

    def to_csv(self, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        if header:
            w.writeheader()
        w.writerow(self.csv_row())
        return buf.getvalue()


def random_packed(fmt, rows: int, cols: int, seed: int = 0) -> PackedMatrix:
    fmt = PackFormat.parse(fmt)
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, len(fmt.level_table), size=(rows, cols), dtype=np.uint8)
    scales = rng.uniform(0.5, 2.0, size=rows).astype(np.float32)
    return PackedMatrix(fmt, rows, cols, pack_codes(codes, fmt), scales)


def run_bench(fmt, rows: int, cols: int, reps: int = 10, threads: int = 1, backend: str | None = None,
              seed: int = 0, warmup: int = 2) -> BenchReport:
    """Time ``reps`` calls of gemv_packed after ``warmup`` untimed calls."""
    from . import _resolve, gemv_packed

    if reps < 1:
        raise ValueError("reps must be >= 1")
    fmt = PackFormat.parse(fmt)
    backend = _resolve(backend)
    p = random_packed(fmt, rows, cols, seed)
    x = np.random.default_rng(seed + 1).standard_normal(cols).astype(np.float32)
    for _ in range(warmup):
        gemv_packed(p, x, threads=threads, backend=backend)
    t0 = time.perf_counter_ns()
    for _ in range(reps):
        gemv_packed(p, x, threads=threads, backend=backend)
    elapsed = max(time.perf_counter_ns() - t0, 1)
    payload = storage_size(fmt, rows, cols)
    return BenchReport(
        format=fmt,
        rows=rows,
        cols=cols,
        reps=reps,
        ns_per_call=elapsed / reps,
        effective_bandwidth=payload * reps / (elapsed * 1e-9),
        threads=threads,
        payload_bytes=payload,
        backend=backend,
    )
