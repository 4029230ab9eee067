"""Four-layer residual MLP used by the training harness.

Layout: ``embed`` (inputs -> hidden, then gain-only layer norm and relu),
two hidden blocks ``fc1``/``fc2`` with residual connections, and the output
layer ``out``. Only the hidden blocks are ever fake-quantized; the first
and last layers stay in full precision.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import Graph
from ..quant import QuantSpec

QUANTIZABLE = ("fc1", "fc2")
LAYERS = ("embed", "fc1", "fc2", "out")


def init_params(n_inputs: int, hidden: int, classes: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 0x1A17])
    shapes = {"embed": (hidden, n_inputs), "fc1": (hidden, hidden), "fc2": (hidden, hidden), "out": (classes, hidden)}
    params = {}
    for name, (fan_out, fan_in) in shapes.items():
        std = np.sqrt(2.0 / fan_in) if name in QUANTIZABLE else np.sqrt(1.0 / fan_in)
        params[f"{name}.weight"] = (rng.standard_normal((fan_out, fan_in)) * std).astype(np.float32)
        params[f"{name}.bias"] = np.zeros(fan_out, dtype=np.float32)
        params[f"{name}.alpha"] = np.ones(fan_out, dtype=np.float32)
    params["ln.gain"] = np.ones(hidden, dtype=np.float32)
    return params


def n_parameters(params: dict) -> int:
    """Trainable weight/bias/gain count (scales excluded)."""
    return sum(v.size for k, v in params.items() if not k.endswith(".alpha"))


class Model:
    """Graph wrapper; ``set_spec`` switches the hidden layers between FP and QAT."""

    def __init__(self, params: dict[str, np.ndarray]):
        g = Graph()
        self.graph = g
        self.layers = {
            name: g.linear_params(name, params[f"{name}.weight"], params[f"{name}.alpha"], params[f"{name}.bias"])
            for name in LAYERS
        }
        gain = g.parameter("ln.gain", params["ln.gain"])
        x = g.input("x")
        h = g.relu(g.layer_norm(g.fake_quant_linear(x, self.layers["embed"]), gain))
        for name in QUANTIZABLE:
            h = g.add(h, g.relu(g.fake_quant_linear(h, self.layers[name])))
        self.logits = g.fake_quant_linear(h, self.layers["out"])
        g.softmax_cross_entropy(self.logits, g.input("y"))

    def set_spec(self, spec: QuantSpec | None) -> None:
        for name in QUANTIZABLE:
            self.layers[name].spec = spec

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self.graph.param_values()

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def loss(self, x, y) -> float:
        return self.graph.forward({"x": x, "y": y})
