"""Training configuration and its JSON form.

Example document (every field optional; unknown keys are rejected)::

    {
      "seed": 0,
      "data": {"seed": 1234, "n_samples": 200000, "seq_len": 8, "features": 12,
               "classes": 10, "teacher_hidden": 64},
      "model": {"hidden": 128},
      "batch_size": 64,
      "fp_lr": 1e-3, "qat_lr": 2e-4,
      "betas": [0.9, 0.999],
      "fp_weight_decay": 0.0, "qat_weight_decay": 0.0,
      "bits": 2,
      "total_steps": 6000,
      "ratios": [0, 0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 0.9, 0.95, 0.99, 1],
      "seeds": [0, 1, 2],
      "fts_grid": [250, 500, 1000, 2000],
      "fts_fp_steps": 3000,
      "log_every": 50
    }
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..quant import QuantSpec

DEFAULT_RATIOS = (0.0, 0.01, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 0.9, 0.95, 0.99, 1.0)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    seed: int = 1234
    n_samples: int = 200000
    seq_len: int = 8
    features: int = 12
    classes: int = 10
    teacher_hidden: int = 64


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 128


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 64
    fp_lr: float = 1e-3
    qat_lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    fp_weight_decay: float = 0.0
    qat_weight_decay: float = 0.0
    bits: float = 2
    total_steps: int = 6000
    ratios: tuple = DEFAULT_RATIOS
    seeds: tuple = (0, 1, 2)
    fts_grid: tuple = (250, 500, 1000, 2000)
    fts_fp_steps: int = 3000
    log_every: int = 50

    @property
    def spec(self) -> QuantSpec:
        return QuantSpec(self.bits)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _check(cond, name, msg):
    if not cond:
        raise ConfigError(f"{name}: {msg}")


def _build(cls, doc, prefix):
    if not isinstance(doc, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a JSON object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for key, value in doc.items():
        path = f"{prefix}{key}"
        if key not in names:
            raise ConfigError(f"{path}: unknown field")
        if key == "data":
            kw[key] = _build(DataConfig, value, "data.")
        elif key == "model":
            kw[key] = _build(ModelConfig, value, "model.")
        elif isinstance(names[key].default, tuple):
            _check(isinstance(value, list), path, "expected a list")
            kw[key] = tuple(value)
        else:
            kw[key] = value
    return cls(**kw)


def validate(cfg: TrainConfig) -> TrainConfig:
    d = cfg.data
    for name in ("seed", "n_samples", "seq_len", "features", "classes", "teacher_hidden"):
        _check(isinstance(getattr(d, name), int) and not isinstance(getattr(d, name), bool), f"data.{name}", "expected an integer")
    _check(d.n_samples >= 10, "data.n_samples", "must be at least 10")
    _check(d.classes >= 2, "data.classes", "must be at least 2")
    _check(isinstance(cfg.model.hidden, int) and cfg.model.hidden > 0, "model.hidden", "expected a positive integer")
    for name in ("seed", "batch_size", "total_steps", "fts_fp_steps", "log_every"):
        v = getattr(cfg, name)
        _check(isinstance(v, int) and not isinstance(v, bool) and v >= 0, name, "expected a non-negative integer")
    _check(cfg.batch_size > 0 and cfg.log_every > 0, "batch_size/log_every", "must be positive")
    for name in ("fp_lr", "qat_lr", "fp_weight_decay", "qat_weight_decay"):
        v = getattr(cfg, name)
        _check(isinstance(v, (int, float)) and v >= 0, name, "expected a non-negative number")
    _check(len(cfg.betas) == 2 and all(0 <= b < 1 for b in cfg.betas), "betas", "expected two numbers in [0, 1)")
    try:
        QuantSpec(cfg.bits)
    except ValueError as e:
        raise ConfigError(f"bits: {e}") from None
    _check(all(isinstance(r, (int, float)) and 0 <= r <= 1 for r in cfg.ratios), "ratios", "values must lie in [0, 1]")
    _check(len(cfg.seeds) > 0 and all(isinstance(s, int) for s in cfg.seeds), "seeds", "expected a nonempty list of integers")
    _check(len(cfg.fts_grid) > 0 and all(isinstance(s, int) and s >= 0 for s in cfg.fts_grid), "fts_grid", "expected a nonempty list of step counts")
    return cfg


def from_dict(doc: dict) -> TrainConfig:
    return validate(_build(TrainConfig, doc, ""))


def load_config(path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    except OSError as e:
        raise ConfigError(f"config: cannot read {path} ({e.strerror})") from None
    return from_dict(doc)


def to_dict(cfg: TrainConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    for key, value in doc.items():
        if isinstance(value, tuple):
            doc[key] = list(value)
    return doc
