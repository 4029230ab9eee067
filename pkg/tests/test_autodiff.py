import math

import numpy as np
import pytest

from lowbitq import quant
from lowbitq.autodiff import AdamState, Graph, GraphError, NumericalDivergence, adamw_step


def fd_grads(g, inputs, h=1e-3):
    out = {}
    for name, node in g.params.items():
        fd = np.zeros(node.value.shape)
        for idx in np.ndindex(node.value.shape):
            old = node.value[idx]
            node.value[idx] = old + h
            fp = g.forward(inputs)
            node.value[idx] = old - h
            fm = g.forward(inputs)
            node.value[idx] = old
            fd[idx] = (fp - fm) / (2 * h)
        out[name] = fd
    return out


def max_rel_err(analytic, numeric):
    worst = 0.0
    for name, a in analytic.items():
        scale = max(np.max(np.abs(a)), 1e-12)
        worst = max(worst, np.max(np.abs(numeric[name] - a)) / scale)
    return worst


def random_graph(rng, dtype):
    """Every smooth op once: matmul (both layouts), add, bias-add, relu, layer norm, softmax-CE."""
    g = Graph(dtype)
    x, y = g.input("x"), g.input("y")
    w1 = g.parameter("w1", rng.standard_normal((6, 5)) * 0.5)
    b1 = g.parameter("b1", rng.standard_normal(5) * 0.1)
    gain = g.parameter("gain", 1 + 0.1 * rng.standard_normal(5))
    w3 = g.parameter("w3", rng.standard_normal((5, 5)) * 0.3)
    w2 = g.parameter("w2", rng.standard_normal((4, 5)) * 0.5)
    pre = g.layer_norm(g.bias_add(g.matmul(x, w1), b1), gain)
    h = g.relu(pre)
    h2 = g.add(h, g.matmul(h, w3))
    g.softmax_cross_entropy(g.matmul(h2, w2, transpose_b=True), y)
    inputs = {"x": rng.standard_normal((8, 6)), "y": rng.integers(0, 4, 8)}
    return g, pre, inputs


def off_kink_graphs(dtype, count, margin=1e-2):
    rng = np.random.default_rng(123)
    found = 0
    while found < count:
        g, pre, inputs = random_graph(rng, dtype)
        g.forward(inputs)
        if np.min(np.abs(pre.value)) < margin:
            continue
        found += 1
        yield g, inputs


# ---------------------------------------------------------------- forward examples


def test_cross_entropy_of_uniform_logits():
    g = Graph()
    z = g.parameter("z", [[0.0, 0.0]])
    g.softmax_cross_entropy(z, g.input("y"))
    assert g.forward({"y": np.array([0])}) == pytest.approx(math.log(2), abs=1e-7)


def test_identity_matmul():
    g = Graph()
    x = g.input("x")
    out = g.matmul(x, g.parameter("eye", np.eye(2)))
    v = np.float32([[3.5, -1.25]])
    g.forward({"x": v})
    np.testing.assert_array_equal(out.value, v)


def test_fake_quant_linear_on_grid_equals_plain_linear():
    rng = np.random.default_rng(0)
    spec = quant.QuantSpec(4)
    alpha = np.float32([0.5, 0.25, 1.0])
    w = (rng.integers(-8, 8, (3, 4)) * alpha[:, None]).astype(np.float32)
    x = rng.standard_normal((5, 4)).astype(np.float32)
    g = Graph()
    layer = g.linear_params("fc", w, alpha, spec=spec)
    out = g.fake_quant_linear(g.input("x"), layer)
    g.forward({"x": x})
    np.testing.assert_array_equal(out.value, x @ w.T)


def test_divergence_detected():
    g = Graph()
    out = g.matmul(g.input("x"), g.parameter("w", [[1e30]]))
    g.softmax_cross_entropy(g.matmul(out, g.parameter("w2", [[1e30, 0.0]])), g.input("y"))
    with pytest.raises(NumericalDivergence):
        g.forward({"x": np.float32([[1e30]]), "y": np.array([0])})


def test_missing_input():
    g = Graph()
    g.relu(g.input("x"))
    with pytest.raises(GraphError):
        g.forward({})


def test_backward_before_forward():
    g = Graph()
    g.softmax_cross_entropy(g.parameter("z", [[1.0, 2.0]]), g.input("y"))
    with pytest.raises(GraphError):
        g.backward()


def test_backward_without_loss():
    g = Graph()
    g.relu(g.parameter("z", [[1.0]]))
    g.forward({})
    with pytest.raises(GraphError):
        g.backward()


# ---------------------------------------------------------------- gradients


def test_linear_regression_gradient_sign():
    # y = 2x learned as a 2-class logit margin; w = 0 must be pushed up
    g = Graph()
    x = g.input("x")
    w = g.parameter("w", [[0.0, 0.0]])
    g.softmax_cross_entropy(g.matmul(x, w), g.input("y"))
    g.forward({"x": np.float32([[1.0], [2.0]]), "y": np.array([1, 1])})
    grad = g.backward()["w"]
    assert grad[0, 1] < 0 < grad[0, 0]


def test_matmul_gradient_finite_difference():
    rng = np.random.default_rng(1)
    for _ in range(5):
        g = Graph(np.float64)
        a = g.parameter("a", rng.standard_normal((4, 4)))
        b = g.parameter("b", rng.standard_normal((4, 4)))
        g.softmax_cross_entropy(g.matmul(a, b), g.input("y"))
        inputs = {"y": rng.integers(0, 4, 4)}
        g.forward(inputs)
        assert max_rel_err(g.backward(), fd_grads(g, inputs)) < 1e-4


def test_finite_difference_all_smooth_ops():
    errs = []
    for g, inputs in off_kink_graphs(np.float64, 20):
        g.forward(inputs)
        errs.append(max_rel_err(g.backward(), fd_grads(g, inputs)))
    assert max(errs) < 1e-4


def test_finite_difference_float32_noise_floor():
    # In float32 the central difference at h = 1e-3 is limited by rounding
    # (about eps / h relative), so only a coarse agreement is checked here.
    for g, inputs in off_kink_graphs(np.float32, 5):
        g.forward(inputs)
        assert max_rel_err(g.backward(), fd_grads(g, inputs)) < 1e-2


def hand_chained(x, w, alpha, spec, dy):
    pair = quant.paretoq_backward(w, alpha, spec, dy.T @ x)
    wq = quant.fake_quant(w, alpha, spec)
    return dy @ wq, pair.d_w, pair.d_alpha


@pytest.mark.parametrize("bits", [1, 1.58, 2, 3, 4])
def test_fake_quant_linear_matches_hand_chain(bits):
    rng = np.random.default_rng(int(bits * 100))
    spec = quant.QuantSpec(bits)
    for _ in range(10):
        w = rng.standard_normal((3, 3)).astype(np.float32)
        alpha = quant.init_scale(w, spec) * np.float32(0.8)
        x = rng.standard_normal((3, 3)).astype(np.float32)
        r = rng.standard_normal((3, 3)).astype(np.float32)
        g = Graph()
        xin = g.parameter("x", x)
        layer = g.linear_params("fc", w, alpha, spec=spec)
        out = g.fake_quant_linear(xin, layer)
        # the upstream gradient for the hand chain is read off the output node
        g.softmax_cross_entropy(g.matmul(out, g.parameter("r", r)), g.input("y"))
        g.forward({"y": np.array([0, 1, 2])})
        grads = g.backward()
        dx, dw, da = hand_chained(x, w, alpha, spec, out.grad)
        np.testing.assert_array_equal(grads["x"], dx)
        np.testing.assert_array_equal(grads["fc.weight"], dw)
        np.testing.assert_array_equal(grads["fc.alpha"], da)


def test_fake_quant_weight_gradient_masked_out_of_range():
    spec = quant.QuantSpec(2)
    w = np.float32([[0.2, 1.5, -2.0], [0.9, -0.1, 3.0], [-1.0, 0.4, 0.0]])
    alpha = np.ones(3, dtype=np.float32)
    g = Graph()
    layer = g.linear_params("fc", w, alpha, spec=spec)
    out = g.fake_quant_linear(g.parameter("x", np.ones((2, 3))), layer)
    g.softmax_cross_entropy(out, g.input("y"))
    g.forward({"y": np.array([0, 2])})
    dw = g.backward()["fc.weight"]
    assert np.all(dw[np.abs(w) >= 1] == 0)
    assert np.all(dw[np.abs(w) < 1] != 0)


def test_plain_linear_when_spec_is_none():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((3, 4))
    g = Graph(np.float64)
    layer = g.linear_params("fc", w, bias=np.zeros(3))
    g.softmax_cross_entropy(g.fake_quant_linear(g.input("x"), layer), g.input("y"))
    inputs = {"x": rng.standard_normal((5, 4)), "y": rng.integers(0, 3, 5)}
    g.forward(inputs)
    grads = g.backward()
    assert not np.any(grads["fc.alpha"])
    fd = fd_grads(g, inputs)
    assert max_rel_err({k: grads[k] for k in ("fc.weight", "fc.bias")}, fd) < 1e-4


def test_determinism():
    def run():
        g, _, inputs = random_graph(np.random.default_rng(7), np.float32)
        state = AdamState()
        losses = []
        for _ in range(20):
            losses.append(g.forward(inputs))
            adamw_step(g.param_values(), g.backward(), state, lr=1e-2)
        return losses

    assert run() == run()


# ---------------------------------------------------------------- optimizer


def test_adamw_zero_gradient_is_noop():
    p = {"w": np.float32([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2, np.float32)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adamw_descends_quadratic():
    p = {"w": np.float32([1.0])}
    adamw_step(p, {"w": 2 * p["w"]}, AdamState(), lr=0.1, betas=(0.9, 0.999))
    assert p["w"][0] < 1.0


@pytest.mark.parametrize("scale", [1e-4, 1.0, 1e4])
def test_adamw_first_step_magnitude(scale):
    p = {"w": np.float32([0.0, 0.0])}
    adamw_step(p, {"w": np.float32([scale, -scale])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"], [-0.01, 0.01], rtol=1e-3)


def test_adamw_decoupled_weight_decay():
    p = {"w": np.float32([2.0])}
    adamw_step(p, {"w": np.float32([0.0])}, AdamState(), lr=0.1, weight_decay=0.5)
    assert p["w"][0] == pytest.approx(2.0 * (1 - 0.05))


def test_adamw_shape_mismatch():
    state = AdamState()
    adamw_step({"w": np.zeros(2, np.float32)}, {"w": np.zeros(2, np.float32)}, state, lr=0.1)
    with pytest.raises(ValueError):
        adamw_step({"w": np.zeros(3, np.float32)}, {"w": np.zeros(3, np.float32)}, state, lr=0.1)
