"""Model-size accounting and accuracy/size Pareto frontiers."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

ALLOWED_BITS = (1, 1.58, 2, 3, 4, 8, 16)
TERNARY_ANALYTIC = math.log2(3)
TERNARY_STORAGE = 8 / 5  # five trits per byte


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class SizeSpec:
    n_weights: int
    weight_bits: float
    n_embedding_weights: int = 0
    embedding_bits: float = 16
    storage_honest: bool = False

    def __post_init__(self):
        for name in ("n_weights", "n_embedding_weights"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise AnalysisError(f"{name} must be a non-negative integer, got {v!r}")
        for name in ("weight_bits", "embedding_bits"):
            if getattr(self, name) not in ALLOWED_BITS:
                raise AnalysisError(f"{name} must be one of {ALLOWED_BITS}, got {getattr(self, name)!r}")


def bits_value(bits: float, storage_honest: bool = False) -> float:
    """Bits per weight used for accounting; 1.58 means log2(3) or 1.6 when storage-honest."""
    if bits == 1.58:
        return TERNARY_STORAGE if storage_honest else TERNARY_ANALYTIC
    return float(bits)


def effective_size(spec: SizeSpec | int, weight_bits: float | None = None, n_embedding_weights: int = 0,
                   embedding_bits: float = 16, storage_honest: bool = False) -> float:
    """(weights * weight bits + embedding weights * embedding bits) / 8, in bytes.

    Accepts a SizeSpec or the four numbers positionally:
    ``effective_size(1000, 2, 100, 4) == 300.0``.
    """
    if not isinstance(spec, SizeSpec):
        spec = SizeSpec(spec, weight_bits, n_embedding_weights, embedding_bits, storage_honest)
    h = spec.storage_honest
    return (spec.n_weights * bits_value(spec.weight_bits, h) + spec.n_embedding_weights * bits_value(spec.embedding_bits, h)) / 8


@dataclass(frozen=True)
class ParetoPoint:
    size_bytes: float
    metric: float
    label: str = ""

    def __post_init__(self):
        if not self.size_bytes > 0:
            raise AnalysisError(f"size_bytes must be positive, got {self.size_bytes!r}")
        if math.isnan(self.metric):
            raise AnalysisError("metric is NaN")


def pareto_front(points) -> list[ParetoPoint]:
    """Points not dominated by any other (smaller-or-equal size and higher-or-equal metric, one strict).

    The result is sorted by size. Exact duplicates appear once (the first
    occurrence); among equal sizes the input order decides.
    """
    points = list(points)
    if not points:
        raise AnalysisError("pareto_front needs at least one point")
    order = sorted(range(len(points)), key=lambda i: (points[i].size_bytes, -points[i].metric, i))
    front = []
    best = -math.inf
    for i in order:
        if points[i].metric > best:
            front.append(points[i])
            best = points[i].metric
    return front


def read_points(text: str, loss: bool = False) -> list[ParetoPoint]:
    """Parse CSV with columns size_bytes, metric and optional label.

    With ``loss=True`` the metric column holds a lower-is-better value and
    is negated on ingestion.
    """
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    missing = {"size_bytes", "metric"} - set(reader.fieldnames or ())
    if missing:
        raise AnalysisError(f"missing column(s): {', '.join(sorted(missing))}")
    out = []
    for row in reader:
        lineno = reader.line_num
        try:
            size = float(row["size_bytes"])
        except (TypeError, ValueError):
            raise AnalysisError(f"line {lineno}: field size_bytes is not a number: {row['size_bytes']!r}") from None
        try:
            metric = float(row["metric"])
        except (TypeError, ValueError):
            raise AnalysisError(f"line {lineno}: field metric is not a number: {row['metric']!r}") from None
        try:
            out.append(ParetoPoint(size, -metric if loss else metric, row.get("label") or ""))
        except AnalysisError as e:
            raise AnalysisError(f"line {lineno}: {e}") from None
    return out


def write_points(points, loss: bool = False) -> str:
    """Frontier CSV; a leading comment records the metric direction."""
    buf = io.StringIO()
    buf.write(f"# metric_direction={'lower_is_better' if loss else 'higher_is_better'}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["size_bytes", "metric", "label"])
    for p in points:
        w.writerow([repr(p.size_bytes), repr(-p.metric if loss else p.metric), p.label])
    return buf.getvalue()
