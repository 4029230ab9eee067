# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled packed-weight GEMV kernels.

Two strategies, both row-parallel with a fixed per-row summation order so
results do not depend on the thread count:

* ``gemv_gather``: walk the row's code stream, look up the row's scaled
  level table and accumulate ``level * x`` in double precision.
* ``gemv_bucket``: for formats with at most 4 levels and several codes per
  byte, precompute for every byte position and byte value a few signed
  sums ("slots") of the activations it covers. A row then needs one table
  lookup per byte. Code c contributes v_c * x to the slot vector; the table
  holds the sums for w_c = v_c - v_0 and v_0 * sum(x) is added back at the
  end. The row result is sum_k coef[r, k] * part[r, k] + rest_coef[r] * rest
  with rest = sum(x) - sum_k part[r, k]. With symmetric level tables
  (s[c] == -s[n-1-c]) the rest term vanishes and fewer slots are needed.
"""

from cython.parallel cimport prange
from libc.stdint cimport uint8_t

import numpy as np

DEF SLICE_BYTES = 1 << 20


cdef inline double _gather4_row(const uint8_t *prow, const float *s, const float *x,
                                Py_ssize_t cols) noexcept nogil:
    cdef double lo = 0.0, hi = 0.0
    cdef Py_ssize_t j
    cdef uint8_t byte
    for j in range(cols // 2):
        byte = prow[j]
        lo += <double>s[byte & 15] * x[2 * j]
        hi += <double>s[byte >> 4] * x[2 * j + 1]
    if cols % 2:
        lo += <double>s[prow[cols // 2] & 15] * x[cols - 1]
    return lo + hi


cdef inline double _gather_row(const uint8_t *prow, const float *s, const float *x,
                               Py_ssize_t cols, unsigned int bits) noexcept nogil:
    cdef double acc = 0.0
    cdef Py_ssize_t c
    cdef unsigned int v, pos, shift
    cdef unsigned int mask = (1u << bits) - 1u
    for c in range(cols):
        pos = c * bits
        shift = pos & 7
        v = prow[pos >> 3] >> shift
        if shift + bits > 8:
            v = v | (<unsigned int>prow[(pos >> 3) + 1] << (8 - shift))
        acc += <double>s[v & mask] * x[c]
    return acc


def gemv_gather(const uint8_t[:, ::1] payload, const float[:, ::1] scaled,
                const float[::1] x, int bits, int cols, float[::1] out, int threads):
    cdef Py_ssize_t rows = payload.shape[0]
    cdef Py_ssize_t nb = payload.shape[1]
    cdef Py_ssize_t nl = scaled.shape[1]
    cdef Py_ssize_t r
    if rows == 0 or cols == 0:
        return
    cdef const uint8_t *pbase = &payload[0, 0]
    cdef const float *sbase = &scaled[0, 0]
    cdef const float *xp = &x[0]
    if bits == 4:
        for r in prange(rows, nogil=True, num_threads=threads, schedule="static"):
            out[r] = <float>_gather4_row(pbase + r * nb, sbase + r * nl, xp, cols)
    else:
        for r in prange(rows, nogil=True, num_threads=threads, schedule="static"):
            out[r] = <float>_gather_row(pbase + r * nb, sbase + r * nl, xp, cols, bits)


cdef inline void _build_group(double *t, const int *prev, const int *top, Py_ssize_t nvals,
                              Py_ssize_t ns, const double *contrib) noexcept nogil:
    cdef Py_ssize_t b, k
    cdef const double *src
    cdef const double *c
    for k in range(ns):
        t[k] = 0.0
    if ns == 1:
        for b in range(1, nvals):
            t[b] = t[prev[b]] + contrib[top[b]]
    elif ns == 2:
        for b in range(1, nvals):
            src = t + 2 * prev[b]
            c = contrib + 2 * top[b]
            t[2 * b] = src[0] + c[0]
            t[2 * b + 1] = src[1] + c[1]
    else:
        for b in range(1, nvals):
            src = t + ns * prev[b]
            c = contrib + ns * top[b]
            for k in range(ns):
                t[ns * b + k] = src[k] + c[k]


def build_bucket_table(const int[::1] prev, const int[::1] top, const double[:, ::1] wvec,
                       const float[::1] x, int per, int cols, double[:, :, ::1] table,
                       int threads):
    """table[g, b, :] = sum over the digits j of byte b of wvec[code_j, :] * x[g*per + j].

    ``top[b]`` = 4 * position + code of the highest nonzero digit of b and
    ``prev[b]`` is b with that digit cleared, so every entry is the
    lowest-digit-first sequential sum. Code 0 must have a zero vector.
    Digits past ``cols`` (row padding) contribute nothing.
    """
    cdef Py_ssize_t groups = table.shape[0]
    cdef Py_ssize_t nvals = table.shape[1]
    cdef Py_ssize_t ns = table.shape[2]
    cdef Py_ssize_t g, j, code, k, col
    cdef double xv
    if groups == 0:
        return
    if wvec.shape[0] != 4 or wvec.shape[1] != ns or per > 8:
        raise ValueError("wvec must have shape (4, slots) and per <= 8")
    # contrib[g, 4 * j + code, k] = wvec[code, k] * x[g * per + j]
    cdef double[:, :, ::1] contrib = np.zeros((groups, 4 * per, ns))
    for g in prange(groups, nogil=True, num_threads=threads, schedule="static"):
        for j in range(per):
            col = g * per + j
            xv = x[col] if col < cols else 0.0
            for code in range(4):
                for k in range(ns):
                    contrib[g, 4 * j + code, k] = wvec[code, k] * xv
    cdef double *tb = &table[0, 0, 0]
    cdef double *cb = &contrib[0, 0, 0]
    cdef const int *pp = &prev[0]
    cdef const int *tp = &top[0]
    for g in prange(groups, nogil=True, num_threads=threads, schedule="static"):
        _build_group(tb + g * nvals * ns, pp, tp, nvals, ns, cb + g * 4 * per * ns)


cdef inline void _bucket_row1(const uint8_t *prow, const double *tb, Py_ssize_t nvals,
                              Py_ssize_t g0, Py_ssize_t g1, double *acc) noexcept nogil:
    cdef double a0 = acc[0], a1 = acc[1], a2 = acc[2], a3 = acc[3]
    cdef Py_ssize_t g = g0
    while g + 3 < g1:
        a0 += tb[g * nvals + prow[g]]
        a1 += tb[(g + 1) * nvals + prow[g + 1]]
        a2 += tb[(g + 2) * nvals + prow[g + 2]]
        a3 += tb[(g + 3) * nvals + prow[g + 3]]
        g += 4
    while g < g1:
        a0 += tb[g * nvals + prow[g]]
        g += 1
    acc[0] = a0
    acc[1] = a1
    acc[2] = a2
    acc[3] = a3


cdef inline void _bucket_row2(const uint8_t *prow, const double *tb, Py_ssize_t nvals,
                              Py_ssize_t g0, Py_ssize_t g1, double *acc) noexcept nogil:
    cdef double a0 = acc[0], a1 = acc[1], a2 = acc[2], a3 = acc[3]
    cdef double b0 = acc[4], b1 = acc[5], b2 = acc[6], b3 = acc[7]
    cdef const double *t0
    cdef const double *t1
    cdef const double *t2
    cdef const double *t3
    cdef Py_ssize_t g = g0
    while g + 3 < g1:
        t0 = tb + (g * nvals + prow[g]) * 2
        t1 = tb + ((g + 1) * nvals + prow[g + 1]) * 2
        t2 = tb + ((g + 2) * nvals + prow[g + 2]) * 2
        t3 = tb + ((g + 3) * nvals + prow[g + 3]) * 2
        a0 += t0[0]
        a1 += t1[0]
        a2 += t2[0]
        a3 += t3[0]
        b0 += t0[1]
        b1 += t1[1]
        b2 += t2[1]
        b3 += t3[1]
        g += 4
    while g < g1:
        t0 = tb + (g * nvals + prow[g]) * 2
        a0 += t0[0]
        b0 += t0[1]
        g += 1
    acc[0] = a0
    acc[1] = a1
    acc[2] = a2
    acc[3] = a3
    acc[4] = b0
    acc[5] = b1
    acc[6] = b2
    acc[7] = b3


cdef inline void _bucket_row3(const uint8_t *prow, const double *tb, Py_ssize_t nvals,
                              Py_ssize_t g0, Py_ssize_t g1, double *acc) noexcept nogil:
    cdef double a0 = acc[0], a1 = acc[1], a2 = acc[2], a3 = acc[3]
    cdef double b0 = acc[4], b1 = acc[5], b2 = acc[6], b3 = acc[7]
    cdef double c0 = acc[8], c1 = acc[9], c2 = acc[10], c3 = acc[11]
    cdef const double *t0
    cdef const double *t1
    cdef const double *t2
    cdef const double *t3
    cdef Py_ssize_t g = g0
    while g + 3 < g1:
        t0 = tb + (g * nvals + prow[g]) * 3
        t1 = tb + ((g + 1) * nvals + prow[g + 1]) * 3
        t2 = tb + ((g + 2) * nvals + prow[g + 2]) * 3
        t3 = tb + ((g + 3) * nvals + prow[g + 3]) * 3
        a0 += t0[0]
        a1 += t1[0]
        a2 += t2[0]
        a3 += t3[0]
        b0 += t0[1]
        b1 += t1[1]
        b2 += t2[1]
        b3 += t3[1]
        c0 += t0[2]
        c1 += t1[2]
        c2 += t2[2]
        c3 += t3[2]
        g += 4
    while g < g1:
        t0 = tb + (g * nvals + prow[g]) * 3
        a0 += t0[0]
        b0 += t0[1]
        c0 += t0[2]
        g += 1
    acc[0] = a0
    acc[1] = a1
    acc[2] = a2
    acc[3] = a3
    acc[4] = b0
    acc[5] = b1
    acc[6] = b2
    acc[7] = b3
    acc[8] = c0
    acc[9] = c1
    acc[10] = c2
    acc[11] = c3


def gemv_bucket(const uint8_t[:, ::1] payload, const double[:, :, ::1] table,
                const double[:, ::1] coef, const double[::1] rest_coef,
                const double[::1] offset, double xsum,
                double[:, ::1] work, float[::1] out, int threads, Py_ssize_t block=0):
    """Row sums from the slot table; ``work`` is (rows, 4 * slots) scratch.

    ``block`` is the number of byte columns per pass; 0 picks it so the
    active table slice is about 1 MiB.
    """
    cdef Py_ssize_t rows = payload.shape[0]
    cdef Py_ssize_t groups = payload.shape[1]
    cdef Py_ssize_t nvals = table.shape[1]
    cdef Py_ssize_t ns = table.shape[2]
    cdef Py_ssize_t width = 4 * ns
    cdef Py_ssize_t r, g0, g1, k
    cdef double y, part, rest
    if rows == 0 or groups == 0:
        return
    if ns < 1 or ns > 3:
        raise ValueError("1 to 3 slots supported")
    if work.shape[0] < rows or work.shape[1] != width:
        raise ValueError("work must have shape (rows, 4 * slots)")
    if (coef.shape[0] != rows or coef.shape[1] != ns or rest_coef.shape[0] != rows
            or offset.shape[0] != ns):
        raise ValueError("coefficient shapes do not match the payload")
    cdef const double *tb = &table[0, 0, 0]
    cdef const uint8_t *pbase = &payload[0, 0]
    cdef double *acc = &work[0, 0]
    for r in range(rows * width):
        acc[r] = 0.0
    # Column blocks keep the active slice of the table cache resident.
    if block <= 0:
        block = max(16, SLICE_BYTES // (nvals * ns * 8))
    g0 = 0
    while g0 < groups:
        g1 = min(g0 + block, groups)
        if ns == 1:
            for r in prange(rows, nogil=True, num_threads=threads, schedule="static"):
                _bucket_row1(pbase + r * groups, tb, nvals, g0, g1, acc + r * width)
        elif ns == 2:
            for r in prange(rows, nogil=True, num_threads=threads, schedule="static"):
                _bucket_row2(pbase + r * groups, tb, nvals, g0, g1, acc + r * width)
        else:
            for r in prange(rows, nogil=True, num_threads=threads, schedule="static"):
                _bucket_row3(pbase + r * groups, tb, nvals, g0, g1, acc + r * width)
        g0 = g1
    for r in prange(rows, nogil=True, num_threads=threads, schedule="static"):
        rest = xsum
        y = 0.0
        for k in range(ns):
            part = ((acc[r * width + 4 * k] + acc[r * width + 4 * k + 1])
                    + (acc[r * width + 4 * k + 2] + acc[r * width + 4 * k + 3]))
            part = part + offset[k] * xsum
            rest = rest - part
            y = y + coef[r, k] * part
        if rest_coef[r] != 0.0:
            y = y + rest_coef[r] * rest
        out[r] = <float>y
