import csv
import io
import json

import numpy as np
import pytest

from lowbitq import bitpack
from lowbitq.cli import main

TINY = {
    "data": {"n_samples": 400},
    "model": {"hidden": 16},
    "total_steps": 20,
    "ratios": [0.0, 0.5, 1.0],
    "seeds": [0, 1],
    "fts_grid": [5, 10],
    "fts_fp_steps": 10,
    "log_every": 5,
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


def test_size_example(capsys):
    code, out, _ = run(capsys, "size", "--n-weights", 1000, "--wbits", 2, "--n-embed", 100, "--ebits", 4)
    assert code == 0 and out.strip() == "300"


def test_size_ternary_modes(capsys):
    _, out, _ = run(capsys, "size", "--n-weights", 1000, "--wbits", 1.58)
    assert float(out) == pytest.approx(198.12, abs=0.01)
    _, out, _ = run(capsys, "size", "--n-weights", 1000, "--wbits", 1.58, "--storage-honest")
    assert out.strip() == "200"


def test_size_rejects_bad_bits(capsys):
    code, _, err = run(capsys, "size", "--n-weights", 10, "--wbits", 5)
    assert code != 0 and "weight_bits" in err


def test_pareto_example(tmp_path, capsys):
    src = tmp_path / "pts.csv"
    src.write_text("size_bytes,metric,label\n100,0.60,a\n150,0.58,b\n200,0.70,c\n")
    code, out, _ = run(capsys, "pareto", src, "--out", tmp_path / "o")
    assert code == 0
    rows = list(csv.DictReader(ln for ln in out.splitlines() if not ln.startswith("#")))
    assert [(float(r["size_bytes"]), float(r["metric"])) for r in rows] == [(100, 0.6), (200, 0.7)]
    assert (tmp_path / "o" / "pareto.csv").read_text() == out


def test_pareto_loss_direction(tmp_path, capsys):
    src = tmp_path / "pts.csv"
    src.write_text("size_bytes,metric\n100,2.0\n150,1.5\n200,1.9\n")
    _, out, _ = run(capsys, "pareto", src, "--loss")
    assert out.startswith("# metric_direction=lower_is_better")
    assert len(out.strip().splitlines()) == 4  # comment, header, two points


@pytest.mark.parametrize(
    "text, field",
    [("size_bytes,metric\n100,abc\n", "metric"), ("size,metric\n1,2\n", "size_bytes"), ("size_bytes,metric\n-3,1\n", "size_bytes")],
)
def test_pareto_malformed(tmp_path, capsys, text, field):
    src = tmp_path / "bad.csv"
    src.write_text(text)
    code, _, err = run(capsys, "pareto", src)
    assert code == 2 and field in err


def test_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "inspect", tmp_path / "nope.pqpk")
    assert code == 2 and "input" in err


@pytest.mark.parametrize("bits, fmt", [(1, "Pack1"), (1.58, "PackTrit243"), (2, "Pack2"), (3, "Pack3"), (4, "Pack4")])
def test_quantize_then_inspect(tmp_path, capsys, bits, fmt):
    w = np.random.default_rng(0).standard_normal((5, 13)).astype(np.float32)
    np.save(tmp_path / "w.npy", w)
    dest = tmp_path / "w.pqpk"
    code, out, _ = run(capsys, "quantize", tmp_path / "w.npy", "--bits", bits, "-o", dest)
    assert code == 0 and json.loads(out)["format"] == fmt
    code, out, _ = run(capsys, "inspect", dest)
    info = json.loads(out)
    p = bitpack.load(dest)
    assert (info["rows"], info["cols"]) == (5, 13)
    assert info["level_table"] == [float(v) for v in p.level_table]
    assert sum(info["histogram"].values()) == 65


def test_quantize_csv_and_explicit_format(tmp_path, capsys):
    src = tmp_path / "w.csv"
    src.write_text("0.5,-1.0,0.25\n1.0,0.0,-0.5\n")
    code, out, _ = run(capsys, "quantize", src, "--bits", 1.58, "--format", "TernaryAs2Bit", "--out", tmp_path)
    assert code == 0
    p = bitpack.load(tmp_path / "w.pqpk")
    assert p.format == bitpack.PackFormat.PACK_TERNARY_AS_2BIT and (p.rows, p.cols) == (2, 3)


@pytest.mark.parametrize("content", ["1,2\n3,x\n", "1,2\n3\n", "nan,1\n"])
def test_quantize_malformed_matrix(tmp_path, capsys, content):
    src = tmp_path / "w.csv"
    src.write_text(content)
    code, _, err = run(capsys, "quantize", src, "-o", tmp_path / "x.pqpk")
    assert code == 2 and "input" in err


def test_inspect_corrupt_file(tmp_path, capsys):
    bad = tmp_path / "bad.pqpk"
    bad.write_bytes(b"PQPX" + bytes(20))
    code, _, err = run(capsys, "inspect", bad)
    assert code == 2 and err


def test_bench_csv(capsys):
    code, out, _ = run(capsys, "bench", "--rows", 32, "--cols", 64, "--reps", 2, "--format", "Pack2,Trit243")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert list(rows[0]) == ["format", "rows", "cols", "threads", "reps", "ns_per_call", "bytes_per_second"]
    assert [r["format"] for r in rows] == ["Pack2", "PackTrit243"]


def test_bench_python_backend(capsys):
    code, out, _ = run(capsys, "bench", "--rows", 8, "--cols", 8, "--reps", 1, "--backend", "python", "--format", "Pack4")
    assert code == 0 and out.count("\n") == 2


def test_sweep_outputs(tmp_path, tiny_config, capsys):
    out_dir = tmp_path / "o"
    code, out, _ = run(capsys, "--config", tiny_config, "sweep", "--out", out_dir)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert list(rows[0]) == ["ratio", "seed", "phase", "step", "loss"]
    assert len(rows) == 3 * 2 + 3
    curves = list(csv.DictReader((out_dir / "sweep_curves.csv").open()))
    assert {r["phase"] for r in curves} == {"fp", "qat", "val"}


def test_sweep_deterministic(tiny_config, capsys):
    _, first, _ = run(capsys, "sweep", "--config", tiny_config, "--seed", 3)
    _, second, _ = run(capsys, "sweep", "--config", tiny_config, "--seed", 3)
    assert first == second
    assert {r["seed"] for r in csv.DictReader(io.StringIO(first))} == {"3", "4", "median"}


def test_fts_and_drift(tmp_path, tiny_config, capsys):
    code, out, _ = run(capsys, "fts", "--config", tiny_config, "--seeds", "0")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["qat_steps"] for r in rows] == ["5", "10", "5", "10"]
    code, out, _ = run(capsys, "drift", "--config", tiny_config, "--seeds", "0", "--bits", "2,4", "--qat-steps", 5)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert {r["layer"] for r in rows} == {"fc1", "fc2", "mean"}
    assert all(float(r["drift"]) >= 0 for r in rows)


def test_drift_from_files(tmp_path, capsys):
    np.savez(tmp_path / "a.npz", **{"fc1.weight": np.ones((1, 2))})
    np.savez(tmp_path / "b.npz", **{"fc1.weight": np.array([[0.5, 1.5]])})
    code, out, _ = run(capsys, "drift", "--init", tmp_path / "a.npz", "--final", tmp_path / "b.npz")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert float(rows[0]["drift"]) == 0.5


def test_bad_config_names_field(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"total_steps": -5}))
    code, _, err = run(capsys, "sweep", "--config", path)
    assert code == 2 and "total_steps" in err


def test_divergence_exit_code(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**TINY, "fp_lr": 1e30, "ratios": [1.0], "seeds": [0]}))
    code, _, err = run(capsys, "sweep", "--config", path)
    assert code == 3 and "diverged" in err
