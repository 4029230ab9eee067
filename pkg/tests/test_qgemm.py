import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowbitq import bitpack, qgemm
from lowbitq.bitpack import PackedMatrix, PackFormat
from lowbitq.qgemm import gemm_packed, gemv_packed, run_bench
from lowbitq.qgemm.bench import CSV_COLUMNS, random_packed

from oracles import reference_gemv

ALL = list(PackFormat)
BACKENDS = [b for b in qgemm.BACKENDS if b == "python" or qgemm.HAVE_COMPILED]


def levels_of(p):
    return bitpack.decode_levels(p)


def rel_err(y, ref):
    y = np.asarray(y, dtype=np.float64)
    scale = np.maximum(np.abs(ref), np.finfo(np.float32).tiny)
    return np.max(np.abs(y - ref) / scale) if ref.size else 0.0


@pytest.mark.parametrize("backend", BACKENDS)
def test_pack2_example(backend):
    # alpha = 4, levels 3/4 and 1/4, x = [2, 1] -> 3*2 + 1*1
    p = bitpack.encode(np.float32([[0.75, 0.25]]), [4.0], "Pack2")
    assert gemv_packed(p, [2.0, 1.0], backend=backend).tolist() == [7.0]


@pytest.mark.parametrize("backend", BACKENDS)
def test_one_by_one(backend):
    p = bitpack.encode(np.float32([[0.75]]), [np.float32(4.0) / np.float32(3.0)], "Pack2")
    assert gemv_packed(p, [1.0], backend=backend)[0] == pytest.approx(1.0, rel=1e-6)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("fmt", ALL)
def test_zero_input(fmt, backend):
    p = random_packed(fmt, 7, 29, seed=1)
    assert not np.any(gemv_packed(p, np.zeros(29), backend=backend))


@pytest.mark.parametrize("backend", BACKENDS)
def test_dimension_mismatch(backend):
    p = random_packed("Pack4", 3, 5)
    with pytest.raises(ValueError):
        gemv_packed(p, np.ones(4), backend=backend)
    with pytest.raises(ValueError):
        gemm_packed(p, np.ones((4, 2)), backend=backend)
    with pytest.raises(ValueError):
        gemv_packed(p, [1, 2, np.nan, 4, 5], backend=backend)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("fmt", ALL)
def test_kernel_matches_oracle(fmt, backend):
    rng = np.random.default_rng(int(fmt) * 17)
    for _ in range(100):
        rows, cols = (int(v) for v in rng.integers(1, 65, 2))
        p = random_packed(fmt, rows, cols, seed=int(rng.integers(2**31)))
        x = rng.standard_normal(cols).astype(np.float32)
        ref = reference_gemv(levels_of(p), p.row_scales, x)
        assert rel_err(gemv_packed(p, x, backend=backend), ref) <= 1e-6


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("fmt", ALL)
def test_exact_on_integer_inputs(fmt, backend):
    rng = np.random.default_rng(int(fmt))
    for _ in range(30):
        rows, cols = (int(v) for v in rng.integers(1, 65, 2))
        codes = rng.integers(0, len(fmt.level_table), (rows, cols))
        # scales 12 make every dequantized level an integer for every table
        scales = np.full(rows, 12.0, dtype=np.float32) * rng.integers(1, 4, rows)
        p = bitpack.encode(fmt.level_table[codes], scales, fmt)
        x = rng.integers(-8, 9, cols).astype(np.float32)
        w = bitpack.decode(p).astype(np.int64)
        assert np.array_equal(gemv_packed(p, x, backend=backend), (w @ x.astype(np.int64)).astype(np.float32))


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("fmt", ALL)
def test_thread_count_independence(fmt, backend):
    p = random_packed(fmt, 97, 301, seed=5)
    x = np.random.default_rng(6).standard_normal(301).astype(np.float32)
    base = gemv_packed(p, x, threads=1, backend=backend)
    for t in (2, 3, 8):
        assert gemv_packed(p, x, threads=t, backend=backend).tobytes() == base.tobytes()


@pytest.mark.skipif(not qgemm.HAVE_COMPILED, reason="compiled kernels not built")
@pytest.mark.parametrize("fmt", ALL)
def test_backends_agree(fmt):
    p = random_packed(fmt, 40, 77, seed=9)
    x = np.random.default_rng(10).standard_normal(77).astype(np.float32)
    a = gemv_packed(p, x, backend="compiled")
    b = gemv_packed(p, x, backend="python")
    np.testing.assert_allclose(a, b, rtol=1e-6)


@pytest.mark.skipif(not qgemm.HAVE_COMPILED, reason="compiled kernels not built")
def test_asymmetric_level_table():
    # a custom table without mirror symmetry takes the general slot layout
    table = np.float32([-1.0, 0.5, 2.0, 3.0])
    rng = np.random.default_rng(0)
    codes = rng.integers(0, 4, (9, 21)).astype(np.uint8)
    p = PackedMatrix(PackFormat.PACK2, 9, 21, bitpack.pack_codes(codes, "Pack2"), rng.uniform(1, 2, 9), table)
    x = rng.standard_normal(21).astype(np.float32)
    ref = reference_gemv(table[codes], p.row_scales, x)
    assert rel_err(gemv_packed(p, x, backend="compiled"), ref) <= 1e-6


@pytest.mark.skipif(not qgemm.HAVE_COMPILED, reason="compiled kernels not built")
def test_compiled_rejects_corrupt_payload():
    p = PackedMatrix(PackFormat.PACK_TRIT243, 1, 5, bytes([250]), [1.0])
    with pytest.raises(bitpack.CorruptPayload):
        gemv_packed(p, np.ones(5), backend="compiled")


@settings(max_examples=60, deadline=None)
@given(
    fmt=st.sampled_from(ALL),
    rows=st.integers(1, 24),
    cols=st.integers(1, 70),
    seed=st.integers(0, 2**31 - 1),
    e=st.integers(-6, 6),
)
def test_power_of_two_input_scaling(fmt, rows, cols, seed, e):
    p = random_packed(fmt, rows, cols, seed)
    x = np.random.default_rng(seed).standard_normal(cols).astype(np.float32)
    y = gemv_packed(p, x)
    assert np.array_equal(gemv_packed(p, x * np.float32(2.0**e)), y * np.float32(2.0**e))


@pytest.mark.parametrize("backend", BACKENDS)
def test_gemm_cases(backend):
    p = random_packed("Pack3", 8, 8, seed=2)
    X = np.random.default_rng(3).standard_normal((8, 5)).astype(np.float32)
    Y = gemm_packed(p, X, backend=backend)
    for j in range(5):
        assert np.array_equal(Y[:, j], gemv_packed(p, X[:, j], backend=backend))
    ref = bitpack.decode(p).astype(np.float64) @ X.astype(np.float64)
    np.testing.assert_allclose(Y, ref, rtol=1e-6, atol=1e-6)
    np.testing.assert_array_equal(gemm_packed(p, np.eye(8), backend=backend), bitpack.decode(p))
    np.testing.assert_array_equal(gemm_packed(p, X[:, :1], backend=backend)[:, 0], gemv_packed(p, X[:, 0], backend=backend))


def test_empty_shapes():
    for fmt in ALL:
        assert gemv_packed(random_packed(fmt, 0, 5), np.ones(5)).shape == (0,)
        assert not np.any(gemv_packed(random_packed(fmt, 4, 0), np.ones(0)))


# ---------------------------------------------------------------- bench


def test_bench_payload_sizes():
    assert run_bench("Pack2", 256, 256, reps=1).payload_bytes == 256 * 256 // 4
    r = run_bench("Pack4", 64, 64, reps=3, warmup=0)
    assert r.payload_bytes == 64 * 64 // 2 and r.reps == 3


def test_bench_report_consistency():
    r = run_bench("PackTrit243", 128, 100, reps=4)
    assert r.ns_per_call > 0
    implied = r.payload_bytes * 1e9 / r.ns_per_call
    assert abs(implied - r.effective_bandwidth) <= 0.01 * r.effective_bandwidth


def test_bench_csv_row():
    r = run_bench("Pack1", 16, 64, reps=1)
    rows = list(csv.DictReader(io.StringIO(r.to_csv())))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert rows[0]["format"] == "Pack1" and rows[0]["rows"] == "16"


def test_bench_rejects_zero_reps():
    with pytest.raises(ValueError):
        run_bench("Pack2", 4, 4, reps=0)


def test_random_packed_is_deterministic():
    assert random_packed("Pack3", 5, 9, 4).payload == random_packed("Pack3", 5, 9, 4).payload


@pytest.mark.slow
def test_bench_full_size_payloads():
    assert run_bench("Pack2", 4096, 4096, reps=1).payload_bytes == 4 * 2**20
    assert run_bench("Pack4", 4096, 4096, reps=1).payload_bytes == 8 * 2**20
