"""Budget-allocation sweep, finetune-vs-scratch comparison and weight drift.

Every run is a pure function of (config, seed), so runs can be farmed out
to a process pool without changing any result.
"""

from __future__ import annotations

import csv
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .model import QUANTIZABLE
from .train import evaluate, fresh_params, train_phase

CURVE_COLUMNS = ("ratio", "seed", "phase", "step", "loss")


@dataclass(frozen=True)
class BudgetSplit:
    total_steps: int
    fp_ratio: float

    def __post_init__(self):
        if not 0 <= self.fp_ratio <= 1:
            raise ValueError(f"fp_ratio must lie in [0, 1], got {self.fp_ratio}")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    @property
    def fp_steps(self) -> int:
        return int(round(self.fp_ratio * self.total_steps))

    @property
    def qat_steps(self) -> int:
        return self.total_steps - self.fp_steps


@dataclass
class RunResult:
    ratio: float
    seed: int
    fp_steps: int
    qat_steps: int
    val_loss: float
    rows: list = field(default_factory=list)  # CURVE_COLUMNS tuples


def _map(fn, jobs, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


# -------------------------------------------------------------------- sweep


def budget_run(cfg: TrainConfig, ratio: float, seed: int) -> RunResult:
    """FP cycle then QAT cycle; ratio 1.0 ends with one-shot quantization (PTQ)."""
    split = BudgetSplit(cfg.total_steps, ratio)
    params, fp_curve = train_phase(cfg, fresh_params(cfg, seed), split.fp_steps, quantized=False, seed=seed)
    params, qat_curve = train_phase(cfg, params, split.qat_steps, quantized=True, seed=seed)
    val = evaluate(cfg, params, quantized=True)
    rows = [(ratio, seed, "fp", s, l) for s, l in fp_curve]
    rows += [(ratio, seed, "qat", split.fp_steps + s, l) for s, l in qat_curve]
    rows.append((ratio, seed, "val", cfg.total_steps, val))
    return RunResult(ratio, seed, split.fp_steps, split.qat_steps, val, rows)


def _budget_job(job):
    return budget_run(*job)


def run_budget_sweep(cfg: TrainConfig, ratios=None, seeds=None, workers: int = 1) -> list[RunResult]:
    ratios = tuple(cfg.ratios if ratios is None else ratios)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    if any(not 0 <= r <= 1 for r in ratios):
        raise ValueError("ratios must lie in [0, 1]")
    return _map(_budget_job, [(cfg, r, s) for r in ratios for s in seeds], workers)


def median_by(results, key) -> dict:
    groups: dict = {}
    for r in results:
        groups.setdefault(key(r), []).append(r.val_loss)
    return {k: statistics.median(v) for k, v in groups.items()}


def sweep_summary(results: list[RunResult]) -> dict[float, float]:
    """Median validation loss per ratio."""
    return dict(sorted(median_by(results, lambda r: r.ratio).items()))


# ------------------------------------------------------- finetune vs scratch


@dataclass
class FtsResult:
    qat_steps: int
    seed: int
    finetune_loss: float
    scratch_loss: float
    fp_loss: float
    drift: float
    rows: list = field(default_factory=list)


def fp_reference(cfg: TrainConfig, seed: int):
    """Converged full-precision init for finetuning and its validation loss."""
    params, curve = train_phase(cfg, fresh_params(cfg, seed), cfg.fts_fp_steps, quantized=False, seed=seed)
    return params, evaluate(cfg, params, quantized=False), curve


def fts_run(cfg: TrainConfig, qat_steps: int, seed: int, fp=None) -> FtsResult:
    fp_params, fp_loss, _ = fp or fp_reference(cfg, seed)
    ft, ft_curve = train_phase(cfg, fp_params, qat_steps, quantized=True, seed=seed)
    sc, sc_curve = train_phase(cfg, fresh_params(cfg, seed), qat_steps, quantized=True, seed=seed)
    ft_loss = evaluate(cfg, ft, quantized=True)
    sc_loss = evaluate(cfg, sc, quantized=True)
    rows = [(qat_steps, seed, "finetune", s, l) for s, l in ft_curve]
    rows += [(qat_steps, seed, "scratch", s, l) for s, l in sc_curve]
    rows += [(qat_steps, seed, "finetune_val", qat_steps, ft_loss), (qat_steps, seed, "scratch_val", qat_steps, sc_loss)]
    return FtsResult(qat_steps, seed, ft_loss, sc_loss, fp_loss, weight_drift(fp_params, ft).mean, rows)


def _fts_seed_job(job):
    cfg, grid, seed = job
    fp = fp_reference(cfg, seed)
    return [fts_run(cfg, steps, seed, fp) for steps in grid]


def run_finetune_vs_scratch(cfg: TrainConfig, grid=None, seeds=None, workers: int = 1) -> list[FtsResult]:
    """For each QAT budget: finetune from the FP reference vs. QAT from random init."""
    grid = tuple(cfg.fts_grid if grid is None else grid)
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    if not grid:
        raise ValueError("grid must be nonempty")
    per_seed = _map(_fts_seed_job, [(cfg, grid, s) for s in seeds], workers)
    return [r for chunk in per_seed for r in chunk]


# -------------------------------------------------------------------- drift


@dataclass(frozen=True)
class DriftReport:
    per_layer: dict
    mean: float


def relative_l1(init, final) -> float:
    init = np.asarray(init, dtype=np.float64)
    final = np.asarray(final, dtype=np.float64)
    if init.shape != final.shape:
        raise ValueError(f"shape mismatch: {init.shape} vs {final.shape}")
    denom = np.abs(init).sum()
    if denom == 0:
        raise ValueError("initial weights are all zero")
    return float(np.abs(final - init).sum() / denom)


def weight_drift(init_params: dict, final_params: dict, layers=QUANTIZABLE) -> DriftReport:
    """Relative L1 change of each quantizable layer's weights; mean over layers."""
    per = {name: relative_l1(init_params[f"{name}.weight"], final_params[f"{name}.weight"]) for name in layers}
    return DriftReport(per, float(np.mean(list(per.values()))))


# -------------------------------------------------------------------- output


def write_rows(path, rows, columns=CURVE_COLUMNS) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v
