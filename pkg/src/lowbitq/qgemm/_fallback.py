"""Pure-numpy packed GEMV, used when the compiled kernels are unavailable."""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..bitpack import PackedMatrix, unpack_codes


def _rows(codes, scaled, x64, lo, hi, out):
    w = np.take_along_axis(scaled[lo:hi], codes[lo:hi].astype(np.intp), axis=1)
    # Row-wise reduction along a contiguous axis: each row's summation order
    # depends only on that row, so chunking by threads cannot change results.
    out[lo:hi] = (w.astype(np.float64) * x64).sum(axis=1)


def gemv(p: PackedMatrix, x: np.ndarray, threads: int = 1) -> np.ndarray:
    codes = unpack_codes(p)
    scaled = p.scaled_levels()
    x64 = x.astype(np.float64)
    out = np.empty(p.rows, dtype=np.float64)
    if p.rows == 0:
        return out.astype(np.float32)
    threads = max(1, min(threads, p.rows))
    if threads == 1:
        _rows(codes, scaled, x64, 0, p.rows, out)
    else:
        bounds = np.linspace(0, p.rows, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            for f in [pool.submit(_rows, codes, scaled, x64, lo, hi, out) for lo, hi in zip(bounds, bounds[1:])]:
                f.result()
    return out.astype(np.float32)
