"""Synthetic sequence-classification corpus labelled by a frozen teacher."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DataConfig


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray

    @property
    def n_inputs(self) -> int:
        return self.x_train.shape[1]


class Teacher:
    """Frozen random two-layer network over a flattened token sequence.

    Each token passes through a shared tanh projection; the token features
    are then mixed across positions and the class is the argmax of the
    resulting logits.
    """

    def __init__(self, cfg: DataConfig):
        rng = np.random.default_rng([cfg.seed, 0x7EAC])
        self.cfg = cfg
        self.w_tok = rng.standard_normal((cfg.features, cfg.teacher_hidden)) / np.sqrt(cfg.features)
        self.w_mix = rng.standard_normal((cfg.seq_len * cfg.teacher_hidden, cfg.classes)) / np.sqrt(cfg.seq_len * cfg.teacher_hidden)

    def logits(self, x: np.ndarray) -> np.ndarray:
        tokens = x.reshape(x.shape[0], self.cfg.seq_len, self.cfg.features).astype(np.float64)
        h = np.tanh(2.0 * tokens @ self.w_tok)
        return h.reshape(x.shape[0], -1) @ self.w_mix

    def labels(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


def gen_dataset(seed: int | None = None, n_samples: int | None = None, cfg: DataConfig | None = None) -> Dataset:
    """Deterministic corpus with a 90/10 train/validation split.

    Args:
        seed: overrides ``cfg.seed``.
        n_samples: overrides ``cfg.n_samples``; must be at least 1.
        cfg: remaining generator settings.
    """
    cfg = cfg or DataConfig()
    if seed is not None or n_samples is not None:
        cfg = DataConfig(**{**cfg.__dict__, **{k: v for k, v in (("seed", seed), ("n_samples", n_samples)) if v is not None}})
    if cfg.n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng([cfg.seed, 0xDA7A])
    x = rng.standard_normal((cfg.n_samples, cfg.seq_len * cfg.features)).astype(np.float32)
    y = Teacher(cfg).labels(x)
    n_train = int(round(0.9 * cfg.n_samples))
    return Dataset(x[:n_train], y[:n_train], x[n_train:], y[n_train:])


def label_entropy(y: np.ndarray, classes: int) -> float:
    """Loss of the best constant predictor (entropy of the label marginal)."""
    p = np.bincount(y, minlength=classes) / max(len(y), 1)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())
