"""Compare the compiled and numpy GEMV backends on every packed format.

Usage::

    python benchmarks/compare_backends.py --rows 1024 --cols 1024 --reps 5

Prints one CSV row per (format, backend) with the usual bench columns plus
``backend`` and ``speedup`` (python time / compiled time). Both backends
are first checked to agree on the benchmark matrix.
"""

import argparse
import csv
import sys

import numpy as np

from lowbitq import qgemm
from lowbitq.bitpack import PackFormat
from lowbitq.qgemm.bench import CSV_COLUMNS, random_packed, run_bench


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=1024)
    ap.add_argument("--cols", type=int, default=1024)
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = ["python"]
    if qgemm.HAVE_COMPILED:
        backends.insert(0, "compiled")
    else:
        print("compiled kernels unavailable; timing the numpy fallback only", file=sys.stderr)

    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(list(CSV_COLUMNS) + ["backend", "speedup"])
    for fmt in PackFormat:
        p = random_packed(fmt, args.rows, args.cols, args.seed)
        x = np.random.default_rng(args.seed + 1).standard_normal(args.cols).astype(np.float32)
        outs = [qgemm.gemv_packed(p, x, threads=args.threads, backend=b) for b in backends]
        for y in outs[1:]:
            np.testing.assert_allclose(y, outs[0], rtol=1e-5, atol=1e-4)
        reports = {b: run_bench(fmt, args.rows, args.cols, args.reps, args.threads, b, args.seed) for b in backends}
        base = reports["python"].ns_per_call
        for b, r in reports.items():
            row = r.csv_row()
            w.writerow([row[c] for c in CSV_COLUMNS] + [b, f"{base / r.ns_per_call:.2f}"])


if __name__ == "__main__":
    main()
