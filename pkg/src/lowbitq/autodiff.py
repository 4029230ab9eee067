"""Small static-graph reverse-mode differentiation over dense matrices.

A :class:`Graph` is built once by calling its op methods, each of which
appends a :class:`Node` and returns it. ``forward`` evaluates the nodes in
creation order (which is a topological order by construction) and
``backward`` walks them in reverse. Ops are limited to what the training
harness needs: matmul, add, bias-add, relu, a gain-only layer norm, mean
softmax cross-entropy and a fake-quantized linear layer whose weight and
scale gradients come from :func:`lowbitq.quant.paretoq_backward`.

Example:
    >>> g = Graph()
    >>> x = g.input("x")
    >>> y = g.input("y")
    >>> w = g.parameter("w", np.zeros((3, 2), np.float32))
    >>> loss = g.softmax_cross_entropy(g.matmul(x, w), y)
    >>> g.forward({"x": np.ones((4, 3)), "y": np.zeros(4, int)})  # doctest: +ELLIPSIS
    0.693...
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quant import QuantSpec, fake_quant, paretoq_backward


class NumericalDivergence(FloatingPointError):
    """A forward value or gradient became NaN or infinite."""


class GraphError(RuntimeError):
    pass


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    name: str = ""
    attrs: dict = field(default_factory=dict)
    value: np.ndarray | None = None
    grad: np.ndarray | None = None

    def __repr__(self):
        shape = None if self.value is None else self.value.shape
        return f"Node({self.op}, name={self.name!r}, shape={shape})"


@dataclass(eq=False)
class FakeQuantLinear:
    """Handles to the parameter nodes of a fake-quantized linear layer.

    ``weight`` is (out, in) and ``alpha`` has one scale per output row.
    The spec may be swapped between forward passes, for instance to move
    from full-precision training (``spec=None``) to QAT.
    """

    weight: Node
    alpha: Node
    spec: QuantSpec | None
    bias: Node | None = None


class Graph:
    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self.loss: Node | None = None
        self._fresh = False

    # ---------------------------------------------------------- building

    def _add(self, op, inputs=(), name="", **attrs) -> Node:
        node = Node(op, tuple(inputs), name or f"{op}{len(self.nodes)}", attrs)
        self.nodes.append(node)
        self._fresh = False
        return node

    def input(self, name: str) -> Node:
        return self._add("input", name=name)

    def parameter(self, name: str, value) -> Node:
        if name in self.params:
            raise GraphError(f"duplicate parameter {name!r}")
        node = self._add("parameter", name=name)
        node.value = np.array(value, dtype=self.dtype)
        self.params[name] = node
        return node

    def matmul(self, a: Node, b: Node, transpose_b: bool = False) -> Node:
        return self._add("matmul", (a, b), transpose_b=transpose_b)

    def add(self, a: Node, b: Node) -> Node:
        return self._add("add", (a, b))

    def bias_add(self, a: Node, bias: Node) -> Node:
        return self._add("bias_add", (a, bias))

    def relu(self, a: Node) -> Node:
        return self._add("relu", (a,))

    def layer_norm(self, a: Node, gain: Node, eps: float = 1e-5) -> Node:
        return self._add("layer_norm", (a, gain), eps=eps)

    def softmax_cross_entropy(self, logits: Node, labels: Node) -> Node:
        """Mean cross-entropy over rows; becomes the graph's loss."""
        node = self._add("softmax_ce", (logits, labels))
        self.loss = node
        return node

    def linear_params(self, name: str, w, alpha=None, bias=None, spec: QuantSpec | None = None) -> FakeQuantLinear:
        w = np.asarray(w)
        alpha = np.ones(w.shape[0]) if alpha is None else alpha
        return FakeQuantLinear(
            self.parameter(f"{name}.weight", w),
            self.parameter(f"{name}.alpha", alpha),
            spec,
            None if bias is None else self.parameter(f"{name}.bias", bias),
        )

    def fake_quant_linear(self, x: Node, layer: FakeQuantLinear) -> Node:
        """x @ fake_quant(W, alpha).T (+ bias); plain linear while ``layer.spec`` is None."""
        ins = (x, layer.weight, layer.alpha) + ((layer.bias,) if layer.bias is not None else ())
        return self._add("fq_linear", ins, layer=layer)

    # ---------------------------------------------------------- evaluation

    def forward(self, inputs: dict) -> float | None:
        """Evaluate every node; return the loss value if a loss node exists."""
        for node in self.nodes:
            if node.op == "input":
                if node.name not in inputs:
                    raise GraphError(f"missing input {node.name!r}")
                v = np.asarray(inputs[node.name])
                node.value = v if v.dtype.kind in "iu" else v.astype(self.dtype)
            elif node.op != "parameter":
                with np.errstate(over="ignore", invalid="ignore"):
                    node.value = _FORWARD[node.op](self, node, *[i.value for i in node.inputs])
            if node.value.dtype.kind == "f" and not np.all(np.isfinite(node.value)):
                raise NumericalDivergence(f"non-finite value in {node.op} node {node.name!r}")
            node.grad = None
        self._fresh = True
        return None if self.loss is None else float(self.loss.value)

    def backward(self) -> dict[str, np.ndarray]:
        """Gradients of the loss with respect to every parameter, by name."""
        if self.loss is None:
            raise GraphError("graph has no loss node")
        if not self._fresh:
            raise GraphError("backward called before forward")
        for node in self.nodes:
            node.grad = None
        self.loss.grad = np.ones((), dtype=self.dtype)
        for node in reversed(self.nodes):
            if node.grad is None or node.op in ("input", "parameter"):
                continue
            with np.errstate(over="ignore", invalid="ignore"):
                grads = _BACKWARD[node.op](self, node, node.grad, *[i.value for i in node.inputs])
            for src, g in zip(node.inputs, grads):
                if g is None:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NumericalDivergence(f"non-finite gradient flowing into {src.name!r}")
                src.grad = g if src.grad is None else src.grad + g
        return {
            name: (n.grad if n.grad is not None else np.zeros_like(n.value)).astype(self.dtype)
            for name, n in self.params.items()
        }

    def param_values(self) -> dict[str, np.ndarray]:
        return {name: n.value for name, n in self.params.items()}

    def set_params(self, values: dict) -> None:
        for name, v in values.items():
            node = self.params[name]
            v = np.asarray(v, dtype=self.dtype)
            if v.shape != node.value.shape:
                raise ValueError(f"{name}: shape {v.shape} != {node.value.shape}")
            node.value = v.copy()
        self._fresh = False


# -------------------------------------------------------------- op rules


def _f_matmul(g, node, a, b):
    return a @ (b.T if node.attrs["transpose_b"] else b)


def _b_matmul(g, node, dy, a, b):
    if node.attrs["transpose_b"]:
        return dy @ b, dy.T @ a
    return dy @ b.T, a.T @ dy


def _f_add(g, node, a, b):
    if a.shape != b.shape:
        raise ValueError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return a + b


def _b_add(g, node, dy, a, b):
    return dy, dy


def _f_bias(g, node, a, b):
    if b.ndim != 1 or b.shape[0] != a.shape[-1]:
        raise ValueError(f"bias of shape {b.shape} does not match {a.shape}")
    return a + b


def _b_bias(g, node, dy, a, b):
    return dy, dy.sum(axis=0)


def _f_relu(g, node, a):
    return np.maximum(a, 0)


def _b_relu(g, node, dy, a):
    return (dy * (a > 0),)


def _f_ln(g, node, a, gain):
    mu = a.mean(axis=1, keepdims=True)
    var = ((a - mu) ** 2).mean(axis=1, keepdims=True)
    inv = 1 / np.sqrt(var + node.attrs["eps"])
    xhat = (a - mu) * inv
    node.attrs["cache"] = (xhat, inv)
    return xhat * gain


def _b_ln(g, node, dy, a, gain):
    xhat, inv = node.attrs["cache"]
    n = a.shape[1]
    dxhat = dy * gain
    dx = inv / n * (n * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
    return dx, (dy * xhat).sum(axis=0)


def _f_ce(g, node, z, labels):
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != z.shape[0]:
        raise ValueError("one label per row required")
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=1, keepdims=True)
    node.attrs["probs"] = e / s
    rows = np.arange(z.shape[0])
    nll = (np.log(s[:, 0]) + zmax[:, 0]) - z[rows, labels]
    return np.asarray(nll.mean(), dtype=g.dtype)


def _b_ce(g, node, dy, z, labels):
    labels = np.asarray(labels).reshape(-1)
    dz = node.attrs["probs"].copy()
    dz[np.arange(z.shape[0]), labels] -= 1
    return dz * (dy / z.shape[0]), None


def _effective_weight(layer, w, alpha):
    if layer.spec is None:
        return w
    return fake_quant(w, alpha, layer.spec).astype(w.dtype)


def _f_fq(g, node, x, w, alpha, bias=None):
    wq = _effective_weight(node.attrs["layer"], w, alpha)
    node.attrs["wq"] = wq
    y = x @ wq.T
    return y if bias is None else y + bias


def _b_fq(g, node, dy, x, w, alpha, bias=None):
    layer = node.attrs["layer"]
    wq = node.attrs["wq"]
    dx = dy @ wq
    d_wq = dy.T @ x
    if layer.spec is None:
        d_w, d_alpha = d_wq, np.zeros_like(alpha)
    else:
        pair = paretoq_backward(w, alpha, layer.spec, d_wq)
        d_w, d_alpha = pair.d_w.astype(g.dtype), pair.d_alpha.astype(g.dtype)
    out = (dx, d_w, d_alpha)
    return out if bias is None else out + (dy.sum(axis=0),)


_FORWARD = {
    "matmul": _f_matmul,
    "add": _f_add,
    "bias_add": _f_bias,
    "relu": _f_relu,
    "layer_norm": _f_ln,
    "softmax_ce": _f_ce,
    "fq_linear": _f_fq,
}
_BACKWARD = {
    "matmul": _b_matmul,
    "add": _b_add,
    "bias_add": _b_bias,
    "relu": _b_relu,
    "layer_norm": _b_ln,
    "softmax_ce": _b_ce,
    "fq_linear": _b_fq,
}


# -------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, betas=(0.9, 0.999),
               weight_decay: float = 0.0, eps: float = 1e-8) -> AdamState:
    """One decoupled-weight-decay Adam update, applied to ``params`` in place."""
    b1, b2 = betas
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape or g.shape != p.shape:
            raise ValueError(f"{name}: state/grad shape does not match parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


sgd_adamw_step = adamw_step
