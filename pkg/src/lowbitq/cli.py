"""Command-line entry point: ``lowbitq <subcommand> ...``.

Subcommands write CSV (tables) or JSON (single records) to stdout and,
when ``--out DIR`` is given, also to files under DIR. Global flags
(``--seed``, ``--config``, ``--out``) may appear before or after the
subcommand.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, bitpack, quant
from .autodiff import NumericalDivergence
from .qgemm.bench import CSV_COLUMNS, run_bench


class CliError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def _emit(args, text: str, filename: str | None = None) -> None:
    sys.stdout.write(text)
    if args.out and filename:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / filename).write_text(text)


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _config(args):
    from .qat.config import TrainConfig, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        # shift the whole seed list so multi-seed medians keep their size
        cfg = cfg.replace(seed=args.seed, seeds=tuple(args.seed + i for i in range(len(cfg.seeds))))
    if getattr(args, "seeds", None):
        cfg = cfg.replace(seeds=tuple(args.seeds))
    if getattr(args, "bits", None) is not None and not isinstance(args.bits, list):
        cfg = cfg.replace(bits=args.bits)
    if getattr(args, "steps", None) is not None:
        cfg = cfg.replace(total_steps=args.steps)
    return cfg


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _bits(text):
    try:
        v = float(text)
        return int(v) if v.is_integer() else v
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid bit width {text!r}") from None


def _format(text):
    try:
        return bitpack.PackFormat.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _load_matrix(path: Path) -> np.ndarray:
    if not path.exists():
        raise CliError(f"input: no such file {path}")
    if path.suffix == ".npy":
        try:
            w = np.load(path, allow_pickle=False)
        except ValueError as e:
            raise CliError(f"input: cannot read {path}: {e}") from None
    else:
        try:
            w = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as e:
            raise CliError(f"input: {path} is not a numeric CSV matrix ({e})") from None
    if w.ndim != 2:
        raise CliError(f"input: expected a 2-D matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise CliError("input: matrix contains NaN or Inf")
    return w.astype(np.float32)


# ---------------------------------------------------------------- commands


def cmd_quantize(args):
    w = _load_matrix(Path(args.input))
    spec = quant.QuantSpec(args.bits)
    fmt = args.format or bitpack.PackFormat.for_spec(spec)
    alpha = quant.init_scale(w, spec)
    q = quant.paretoq_forward(w, alpha, spec)
    packed = bitpack.encode(q, alpha, fmt)
    dest = Path(args.output) if args.output else Path(args.out or ".") / (Path(args.input).stem + ".pqpk")
    dest.parent.mkdir(parents=True, exist_ok=True)
    bitpack.save(packed, dest)
    info = {"output": str(dest), "format": fmt.label, "rows": packed.rows, "cols": packed.cols,
            "payload_bytes": len(packed.payload), "scale_bytes": 4 * packed.scales.size}
    sys.stdout.write(json.dumps(info) + "\n")


def cmd_inspect(args):
    path = Path(args.input)
    if not path.exists():
        raise CliError(f"input: no such file {path}")
    try:
        p = bitpack.load(path)
        codes = bitpack.unpack_codes(p)
    except bitpack.PackError as e:
        raise CliError(f"input: {e}") from None
    counts = np.bincount(codes.reshape(-1), minlength=len(p.level_table))
    info = {
        "format": p.format.label,
        "rows": p.rows,
        "cols": p.cols,
        "payload_bytes": len(p.payload),
        "scale_bytes": 4 * p.scales.size,
        "bits_per_weight": p.format.bits_per_weight,
        "level_table": [float(v) for v in p.level_table],
        "histogram": {repr(float(v)): int(c) for v, c in zip(p.level_table, counts)},
    }
    _emit(args, json.dumps(info, indent=1) + "\n", path.stem + ".inspect.json")


def cmd_bench(args):
    rows = []
    seed = args.seed if args.seed is not None else 0
    for name in args.format:
        r = run_bench(name, args.rows, args.cols, reps=args.reps, threads=args.threads, backend=args.backend, seed=seed)
        rows.append(r.csv_row())
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _emit(args, buf.getvalue(), "bench.csv")


def cmd_sweep(args):
    from .qat.experiments import CURVE_COLUMNS, run_budget_sweep, sweep_summary, write_rows

    cfg = _config(args)
    ratios = args.ratios if args.ratios else None
    results = run_budget_sweep(cfg, ratios=ratios, workers=args.workers)
    if args.out:
        write_rows(Path(args.out) / "sweep_curves.csv", [row for r in results for row in r.rows])
    rows = [(r.ratio, r.seed, "val", cfg.total_steps, r.val_loss) for r in results]
    rows += [(ratio, "median", "val", cfg.total_steps, loss) for ratio, loss in sweep_summary(results).items()]
    _emit(args, _csv(rows, CURVE_COLUMNS), "sweep.csv")


def cmd_fts(args):
    from .qat.experiments import run_finetune_vs_scratch, write_rows

    cfg = _config(args)
    results = run_finetune_vs_scratch(cfg, grid=args.grid or None, workers=args.workers)
    if args.out:
        write_rows(Path(args.out) / "fts_curves.csv", [row for r in results for row in r.rows],
                   ("qat_steps", "seed", "phase", "step", "loss"))
    cols = ("qat_steps", "seed", "finetune_loss", "scratch_loss", "fp_loss", "drift")
    rows = [(r.qat_steps, r.seed, r.finetune_loss, r.scratch_loss, r.fp_loss, r.drift) for r in results]
    for steps in sorted({r.qat_steps for r in results}):
        sel = [r for r in results if r.qat_steps == steps]
        rows.append((steps, "median", *(statistics.median(getattr(r, c) for r in sel) for c in cols[2:])))
    _emit(args, _csv(rows, cols), "fts.csv")


def cmd_drift(args):
    from .qat.experiments import fp_reference, weight_drift
    from .qat.train import train_phase

    cols = ("bits", "seed", "qat_steps", "layer", "drift")
    if args.init or args.final:
        if not (args.init and args.final):
            raise CliError("--init and --final must be given together")
        a, b = _load_params(args.init, "init"), _load_params(args.final, "final")
        rep = weight_drift(a, b, layers=sorted({k.split(".")[0] for k in a if k.endswith(".weight")} & {k.split(".")[0] for k in b}))
        rows = [("", "", "", name, v) for name, v in rep.per_layer.items()] + [("", "", "", "mean", rep.mean)]
        _emit(args, _csv(rows, cols), "drift.csv")
        return
    cfg = _config(args)
    steps = args.qat_steps if args.qat_steps is not None else max(cfg.fts_grid)
    rows = []
    for seed in cfg.seeds:
        fp_params = fp_reference(cfg, seed)[0]
        for bits in args.bits or [2, 4]:
            final, _ = train_phase(cfg.replace(bits=bits), fp_params, steps, quantized=True, seed=seed)
            rep = weight_drift(fp_params, final)
            rows += [(bits, seed, steps, name, v) for name, v in rep.per_layer.items()]
            rows.append((bits, seed, steps, "mean", rep.mean))
    _emit(args, _csv(rows, cols), "drift.csv")


def _load_params(path, field):
    p = Path(path)
    if not p.exists():
        raise CliError(f"{field}: no such file {p}")
    try:
        with np.load(p, allow_pickle=False) as z:
            return {k: z[k] for k in z.files}
    except (ValueError, OSError) as e:
        raise CliError(f"{field}: cannot read {p} as .npz ({e})") from None


def cmd_pareto(args):
    path = Path(args.input)
    if not path.exists():
        raise CliError(f"input: no such file {path}")
    points = analysis.read_points(path.read_text(), loss=args.loss)
    _emit(args, analysis.write_points(analysis.pareto_front(points), loss=args.loss), "pareto.csv")


def cmd_size(args):
    spec = analysis.SizeSpec(args.n_weights, args.wbits, args.n_embed, args.ebits, args.storage_honest)
    _emit(args, f"{analysis.effective_size(spec):.10g}\n", "size.txt")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="base random seed")
    common.add_argument("--config", default=argparse.SUPPRESS, help="TrainConfig JSON file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="directory for output files")

    p = argparse.ArgumentParser(prog="lowbitq", description="Low-bit weight quantization toolkit.", parents=[common])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", parents=[common], help="quantize a matrix (.npy or CSV) into a packed file")
    q.add_argument("input")
    q.add_argument("--bits", type=_bits, default=2, choices=[1, 1.58, 2, 3, 4])
    q.add_argument("--format", type=_format, help="packed format (default: natural format for --bits)")
    q.add_argument("-o", "--output", help="output path (default: <out>/<input stem>.pqpk)")
    q.set_defaults(func=cmd_quantize)

    i = sub.add_parser("inspect", parents=[common], help="describe a packed file")
    i.add_argument("input")
    i.set_defaults(func=cmd_inspect)

    b = sub.add_parser("bench", parents=[common], help="time packed GEMV kernels")
    b.add_argument("--format", type=lambda t: [_format(v) for v in t.split(",")], default=["Pack2", "Pack4"],
                   help="comma-separated format list")
    b.add_argument("--rows", type=int, default=4096)
    b.add_argument("--cols", type=int, default=4096)
    b.add_argument("--reps", type=int, default=10)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--backend", choices=["compiled", "python"])
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", parents=[common], help="FP/QAT budget-allocation sweep")
    s.add_argument("--bits", type=_bits)
    s.add_argument("--steps", type=int, help="total step budget")
    s.add_argument("--ratios", type=_float_list)
    s.add_argument("--seeds", type=_int_list)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("fts", parents=[common], help="finetune-vs-scratch QAT comparison")
    f.add_argument("--bits", type=_bits)
    f.add_argument("--grid", type=_int_list, help="QAT step budgets")
    f.add_argument("--seeds", type=_int_list)
    f.add_argument("--workers", type=int, default=1)
    f.set_defaults(func=cmd_fts)

    d = sub.add_parser("drift", parents=[common], help="relative L1 weight drift after QAT")
    d.add_argument("--bits", type=lambda t: [_bits(v) for v in t.split(",")])
    d.add_argument("--qat-steps", type=int)
    d.add_argument("--seeds", type=_int_list)
    d.add_argument("--init", help="initial parameters (.npz)")
    d.add_argument("--final", help="final parameters (.npz)")
    d.set_defaults(func=cmd_drift)

    pa = sub.add_parser("pareto", parents=[common], help="Pareto frontier of a points CSV")
    pa.add_argument("input", help="CSV with columns size_bytes, metric[, label]")
    pa.add_argument("--loss", action="store_true", help="metric is lower-is-better")
    pa.set_defaults(func=cmd_pareto)

    z = sub.add_parser("size", parents=[common], help="effective model size in bytes")
    z.add_argument("--n-weights", type=int, required=True)
    z.add_argument("--wbits", type=_bits, required=True)
    z.add_argument("--n-embed", type=int, default=0)
    z.add_argument("--ebits", type=_bits, default=16)
    z.add_argument("--storage-honest", action="store_true", help="count 1.58-bit weights at 1.6 bits")
    z.set_defaults(func=cmd_size)
    return p


def main(argv=None) -> int:
    from .qat.config import ConfigError

    args = build_parser().parse_args(argv)
    for name in ("seed", "config", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        args.func(args)
    except NumericalDivergence as e:
        print(f"lowbitq: training diverged: {e}", file=sys.stderr)
        return 3
    except (CliError, ConfigError, analysis.AnalysisError, quant.QuantError, bitpack.PackError) as e:
        print(f"lowbitq: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
