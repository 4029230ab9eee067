"""Single training phases: full precision or quantization-aware."""

from __future__ import annotations

import functools
import math

import numpy as np

from ..autodiff import AdamState, adamw_step
from ..quant import init_scale
from .config import DataConfig, TrainConfig
from .data import Dataset, gen_dataset
from .model import QUANTIZABLE, Model, init_params

# Learned scales are kept strictly positive after every update.
ALPHA_FLOOR = 1e-6


@functools.lru_cache(maxsize=4)
def dataset_for(cfg: DataConfig) -> Dataset:
    return gen_dataset(cfg=cfg)


def fresh_params(cfg: TrainConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    d = cfg.data
    return init_params(d.seq_len * d.features, cfg.model.hidden, d.classes, cfg.seed if seed is None else seed)


def cosine_lr(lr0: float, step: int, steps: int) -> float:
    """Cosine decay from lr0 at step 0 to zero at step ``steps``."""
    return 0.5 * lr0 * (1 + math.cos(math.pi * step / steps))


def with_initial_scales(params: dict, spec) -> dict:
    """Copy of ``params`` with every quantized layer's alpha set by init_scale."""
    out = {k: v.copy() for k, v in params.items()}
    for name in QUANTIZABLE:
        out[f"{name}.alpha"] = init_scale(out[f"{name}.weight"], spec).astype(np.float32)
    return out


def evaluate(cfg: TrainConfig, params: dict, quantized: bool, data: Dataset | None = None) -> float:
    """Validation loss, with the hidden layers fake-quantized if requested."""
    data = data or dataset_for(cfg.data)
    model = Model(params)
    model.set_spec(cfg.spec if quantized else None)
    return model.loss(data.x_val, data.y_val)


def train_phase(cfg: TrainConfig, init: dict, steps: int, quantized: bool, seed: int | None = None,
                data: Dataset | None = None, lr: float | None = None):
    """Run one complete cosine cycle of AdamW.

    A quantized phase first re-initializes every hidden layer's alpha from
    its current weights, then trains weights and scales jointly through the
    fake-quantized forward pass. ``steps = 0`` returns the (re-scaled)
    parameters untouched.

    Returns:
        (params, curve) where curve is a list of (step, training loss)
        recorded every ``cfg.log_every`` steps and at the last step.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    seed = cfg.seed if seed is None else seed
    data = data or dataset_for(cfg.data)
    params = with_initial_scales(init, cfg.spec) if quantized else {k: v.copy() for k, v in init.items()}
    if steps == 0:
        return params, []
    model = Model(params)
    model.set_spec(cfg.spec if quantized else None)
    graph = model.graph
    lr0 = lr if lr is not None else (cfg.qat_lr if quantized else cfg.fp_lr)
    wd = cfg.qat_weight_decay if quantized else cfg.fp_weight_decay
    live = graph.param_values()
    alphas = [live[f"{n}.alpha"] for n in QUANTIZABLE]
    state = AdamState()
    rng = np.random.default_rng([seed, 1 if quantized else 0])
    n = data.x_train.shape[0]
    order = rng.permutation(n)
    pos = 0
    curve = []
    for step in range(steps):
        if pos + cfg.batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        loss = graph.forward({"x": data.x_train[idx], "y": data.y_train[idx]})
        grads = graph.backward()
        adamw_step(live, grads, state, cosine_lr(lr0, step, steps), cfg.betas, wd)
        if quantized:
            for a in alphas:
                np.maximum(a, ALPHA_FLOOR, out=a)
        if step % cfg.log_every == 0 or step == steps - 1:
            curve.append((step, loss))
    return model.copy_params(), curve
