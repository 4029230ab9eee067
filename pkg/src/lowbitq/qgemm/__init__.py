"""Dequantize-on-the-fly matrix-vector and matrix-matrix products.

The compiled Cython kernels are used when importable; otherwise (or when
``LOWBITQ_BACKEND=python``) the numpy fallback is selected. Both read the
same ``PackedMatrix`` and agree with decode-then-dense to within double
precision rounding of the accumulation.
"""

from __future__ import annotations

import math
import os
import threading

import numpy as np

from ..bitpack import CorruptPayload, PackedMatrix, PackFormat
from . import _fallback

try:
    from . import _kernels
except ImportError:  # pragma: no cover - depends on the build
    _kernels = None

BACKENDS = ("compiled", "python")
HAVE_COMPILED = _kernels is not None


def default_backend() -> str:
    forced = os.environ.get("LOWBITQ_BACKEND", "").strip().lower()
    if forced:
        if forced not in BACKENDS:
            raise ValueError(f"LOWBITQ_BACKEND must be one of {BACKENDS}, got {forced!r}")
        if forced == "compiled" and not HAVE_COMPILED:
            raise ImportError("LOWBITQ_BACKEND=compiled but lowbitq.qgemm._kernels is not built")
        return forced
    return "compiled" if HAVE_COMPILED else "python"


BACKEND = default_backend()


def _resolve(backend):
    backend = backend or BACKEND
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "compiled" and not HAVE_COMPILED:
        raise ImportError("compiled qgemm kernels are not built")
    return backend


class _BytePlan:
    """How each byte value of a bucket format decomposes into digit codes.

    ``prev[b]`` is b with its highest nonzero digit cleared; ``top[b]`` is
    4 * position + code of that digit.
    """

    def __init__(self, fmt: PackFormat):
        if fmt is PackFormat.PACK_TRIT243:
            base, self.per, nvals = 3, 5, 243
        else:
            base, self.per = 1 << fmt.code_bits, 8 // fmt.code_bits
            nvals = 256
        b = np.arange(nvals)
        digits = (b[:, None] // base ** np.arange(self.per)) % base
        top = np.where(digits > 0, np.arange(self.per), -1).max(axis=1)
        top_safe = np.maximum(top, 0)
        code = digits[b, top_safe]
        self.nvals = nvals
        self.top = np.ascontiguousarray(4 * top_safe + code, dtype=np.int32)
        self.prev = np.ascontiguousarray(b - code * base**top_safe, dtype=np.int32)


_BUCKET_FORMATS = {
    f: _BytePlan(f)
    for f in (PackFormat.PACK1, PackFormat.PACK2, PackFormat.PACK_TERNARY_AS_2BIT, PackFormat.PACK_TRIT243)
}


def _slot_plan(p: PackedMatrix):
    """(wvec, offset, coef, rest_coef) for the bucket kernel, cached on ``p``.

    Code c adds v_c * x to the per-row slot sums. The table stores
    w_c = v_c - v_0 so that code 0 costs nothing; ``offset`` = v_0 restores
    it through sum(x).
    """
    plan = getattr(p, "_slot_plan", None)
    if plan is not None:
        return plan
    scaled = p.scaled_levels()
    n = scaled.shape[1]
    if np.array_equal(scaled, -scaled[:, ::-1]):
        # s[c] == -s[n-1-c]: pair each upper code with its mirror.
        half = n // 2
        v = np.zeros((4, half))
        for k in range(half):
            up = n - half + k
            v[up, k], v[n - 1 - up, k] = 1.0, -1.0
        coef = scaled[:, n - half :].astype(np.float64)
        rest_coef = np.zeros(p.rows, dtype=np.float64)
    else:
        # Codes 1.. get their own slot; code 0 is recovered from sum(x).
        v = np.zeros((4, n - 1))
        v[1:n, :] = np.eye(n - 1)
        coef = scaled[:, 1:].astype(np.float64)
        rest_coef = scaled[:, 0].astype(np.float64)
    # Rows of v cover every digit value a byte can hold; unused codes stay 0.
    offset = v[0].copy()
    plan = (np.ascontiguousarray(v - offset), offset, np.ascontiguousarray(coef), np.ascontiguousarray(rest_coef))
    object.__setattr__(p, "_slot_plan", plan)
    return plan


def _validate(p: PackedMatrix) -> None:
    # Payload codes outside the level table would index past it in the kernel.
    if getattr(p, "_validated", False):
        return
    raw = np.frombuffer(p.payload, dtype=np.uint8)
    if p.format is PackFormat.PACK_TRIT243 and np.any(raw >= 243):
        raise CorruptPayload("trit byte >= 243")
    if p.format is PackFormat.PACK_TERNARY_AS_2BIT:
        if np.any((raw & (raw >> 1) & 0x55) != 0):
            raise CorruptPayload("2-bit ternary code 3 in payload")
    if p.format is PackFormat.PACK3 and p.cols:
        from ..bitpack import unpack_codes

        unpack_codes(p)
    object.__setattr__(p, "_validated", True)


_scratch = threading.local()


def _workspace(name: str, shape) -> np.ndarray:
    # Reused per thread: fresh multi-megabyte buffers cost page faults per call.
    size = int(np.prod(shape))
    buf = getattr(_scratch, name, None)
    if buf is None or buf.size < size:
        buf = np.empty(max(size, 1), dtype=np.float64)
        setattr(_scratch, name, buf)
    return buf[:size].reshape(shape)


def _compiled_gemv(p: PackedMatrix, x: np.ndarray, threads: int) -> np.ndarray:
    _validate(p)
    out = np.zeros(p.rows, dtype=np.float32)
    if p.rows == 0 or p.cols == 0:
        return out
    payload = p.payload_array()
    byte_plan = _BUCKET_FORMATS.get(p.format)
    if byte_plan is None:
        _kernels.gemv_gather(payload, p.scaled_levels(), x, p.format.code_bits, p.cols, out, threads)
        return out
    wvec, offset, coef, rest_coef = _slot_plan(p)
    ns = coef.shape[1]
    table = _workspace("table", (p.row_bytes, byte_plan.nvals, ns))
    acc = _workspace("acc", (p.rows, 4 * ns))
    _kernels.build_bucket_table(
        byte_plan.prev, byte_plan.top, wvec, x, byte_plan.per, p.cols, table, threads
    )
    xsum = math.fsum(x.tolist())
    _kernels.gemv_bucket(payload, table, coef, rest_coef, offset, xsum, acc, out, threads)
    return out


def gemv_packed(p: PackedMatrix, x, threads: int = 1, backend: str | None = None) -> np.ndarray:
    """y[r] = sum_c alpha_r * level[code[r, c]] * x[c], returned as float32.

    Accumulation is in double precision; the per-row summation order is
    fixed, so the result is bitwise identical for any ``threads``.
    """
    x = np.ascontiguousarray(x, dtype=np.float32).reshape(-1)
    if x.shape[0] != p.cols:
        raise ValueError(f"x has length {x.shape[0]}, matrix has {p.cols} columns")
    if not np.all(np.isfinite(x)):
        raise ValueError("x contains NaN or Inf")
    threads = max(1, int(threads))
    if _resolve(backend) == "compiled":
        return _compiled_gemv(p, x, threads)
    return _fallback.gemv(p, x, threads)


def gemm_packed(p: PackedMatrix, X, threads: int = 1, backend: str | None = None) -> np.ndarray:
    """Column j of the result is ``gemv_packed(p, X[:, j])``."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 2 or X.shape[0] != p.cols:
        raise ValueError(f"X must have shape ({p.cols}, n), got {X.shape}")
    out = np.empty((p.rows, X.shape[1]), dtype=np.float32)
    for j in range(X.shape[1]):
        out[:, j] = gemv_packed(p, X[:, j], threads=threads, backend=backend)
    return out


from .bench import BenchReport, run_bench  # noqa: E402

__all__ = ["BACKEND", "BACKENDS", "HAVE_COMPILED", "BenchReport", "gemm_packed", "gemv_packed", "run_bench"]
