import math

import numpy as np
import pytest

from predinfo import diffcore as dc
from _fd import check_grads, numeric_grad, rel_error


def _scalarize(g, node):
    # weighted sum keeps every output element's gradient distinct
    return g.sum(g.mul(node, g.input("w_out")))


def _unary_case(op, shape=(3, 4), **kw):
    g = dc.Graph()
    x = g.input("x")
    node = getattr(g, op)(x, **kw)
    g.set_output(_scalarize(g, node))
    return g


UNARY = [
    ("tanh", {}, (3, 4)),
    ("sigmoid", {}, (3, 4)),
    ("relu", {}, (3, 4)),
    ("exp", {}, (3, 4)),
    ("exp", {"clamp": 0.3}, (3, 4)),
    ("softplus", {}, (3, 4)),
    ("scale", {"factor": -2.5, "shift": 0.7}, (3, 4)),
    ("logsumexp", {"axis": 1}, (3, 4)),
    ("logsumexp", {"axis": 0, "mean": True}, (3, 4)),
    ("sum", {"axis": 0}, (3, 4)),
    ("mean", {"axis": 1}, (3, 4)),
    ("sum", {}, (3, 4)),
    ("mean", {}, (3, 4)),
    ("slice", {"start": 1, "stop": 3, "axis": 1}, (3, 4)),
    ("diag", {}, (4, 4)),
]


@pytest.mark.parametrize("op,kw,shape", UNARY, ids=[f"{o}-{i}" for i, (o, _, _) in enumerate(UNARY)])
def test_unary_gradients_match_finite_differences(op, kw, shape):
    rng = np.random.default_rng(3)
    x = rng.normal(size=shape)
    x[np.abs(x) < 0.05] += 0.2  # keep away from the relu kink
    x[np.abs(x - 0.3) < 0.05] += 0.2  # and from the exp clamp
    g = _unary_case(op, shape, **kw)
    out_shape = dc.evaluate(g, {"x": x, "w_out": np.zeros(())})[g.nodes[-1].inputs[0]].shape
    leaves = {"x": x, "w_out": rng.normal(size=out_shape)}
    _, grads = dc.value_and_gradients(g, leaves, wrt=["x"])
    f = lambda: dc.value_and_gradients(g, leaves, wrt=[])[0]
    assert rel_error(grads["x"], numeric_grad(f, x)) < 1e-6


BINARY = [
    ("add", (3, 4), (4,)),
    ("sub", (3, 4), ()),
    ("mul", (3, 4), (3, 4)),
    ("mul", (4,), (3, 4)),
    ("matmul", (3, 4), (4, 2)),
]


@pytest.mark.parametrize("op,sa,sb", BINARY)
def test_binary_gradients_match_finite_differences(op, sa, sb):
    rng = np.random.default_rng(5)
    g = dc.Graph()
    node = getattr(g, op)(g.input("a"), g.input("b"))
    g.set_output(_scalarize(g, node))
    a, b = rng.normal(size=sa), rng.normal(size=sb)
    out = dc.evaluate(g, {"a": a, "b": b, "w_out": np.zeros(())})[node]
    leaves = {"a": a, "b": b, "w_out": rng.normal(size=out.shape)}
    _, grads = dc.value_and_gradients(g, leaves)
    errs = check_grads(lambda: dc.value_and_gradients(g, leaves, wrt=[])[0], leaves, grads, ["a", "b"])
    assert max(errs.values()) < 1e-6


def test_matmul_transpose_concat_and_density_gradients():
    rng = np.random.default_rng(8)
    g = dc.Graph()
    a, b, c = g.input("a"), g.input("b"), g.input("c")
    s = g.matmul(a, b, transpose_b=True)  # (3, 5)
    cat = g.concat([s, c], axis=0)  # (5, 5)
    lp = g.gaussian_log_density(cat, g.scale(cat, 0.5, 0.1), sigma=0.7)
    g.set_output(g.add(g.mean(lp), g.sum(g.diag(cat))))
    leaves = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(5, 2)), "c": rng.normal(size=(2, 5))}
    _, grads = dc.value_and_gradients(g, leaves)
    errs = check_grads(lambda: dc.value_and_gradients(g, leaves, wrt=[])[0], leaves, grads)
    assert max(errs.values()) < 1e-6


def test_sum_of_product_gradient_has_column_sum_structure():
    rng = np.random.default_rng(0)
    g = dc.Graph()
    g.set_output(g.sum(g.matmul(g.input("A"), g.input("B"))))
    A, B = rng.normal(size=(3, 4)), rng.normal(size=(4, 5))
    grads = dc.gradients(g, {"A": A, "B": B})
    # d sum(AB)/dA_ij = sum_k B_jk
    np.testing.assert_allclose(grads["A"], np.tile(B.sum(axis=1), (3, 1)), rtol=1e-12)
    num = numeric_grad(lambda: dc.value_and_gradients(g, {"A": A, "B": B}, wrt=[])[0], A)
    assert rel_error(grads["A"], num) < 1e-6


def test_simple_values():
    g = dc.Graph()
    x = g.input("x")
    g.set_output(g.sum(g.tanh(x)))
    val, grads = dc.value_and_gradients(g, {"x": np.zeros(())})
    assert val == 0.0 and grads["x"] == 1.0

    g = dc.Graph()
    node = g.logsumexp(g.input("x"), axis=1)
    g.set_output(g.sum(node))
    c, k = 1.7, 9
    assert dc.evaluate(g, {"x": np.full((1, k), c)})[node][0] == pytest.approx(c + math.log(k), abs=1e-12)


def test_logsumexp_is_stable_for_large_inputs():
    g = dc.Graph()
    node = g.logsumexp(g.input("x"), axis=1)
    g.set_output(g.sum(node))
    val = dc.evaluate(g, {"x": np.array([[1000.0, 1000.0]])})[node][0]
    assert val == pytest.approx(1000.0 + math.log(2.0))


def test_constant_graph_has_zero_gradients():
    g = dc.Graph()
    x = g.input("x")
    g.input("unused")
    g.set_output(g.sum(g.const(np.ones((2, 2)))))
    grads = dc.gradients(g, {"x": np.ones(3), "unused": np.ones(2)})
    assert not np.any(grads["x"]) and not np.any(grads["unused"])
    assert x in g.inputs.values()


def test_three_layer_composition_matches_straight_line_code():
    rng = np.random.default_rng(11)
    dims = [5, 7, 6, 3]
    params = {f"W{i}": rng.normal(size=(dims[i], dims[i + 1])) for i in range(3)}
    params.update({f"b{i}": rng.normal(size=dims[i + 1]) for i in range(3)})
    x = rng.normal(size=(4, 5))
    g = dc.Graph()
    h = g.input("x")
    acts = [g.tanh, g.sigmoid, g.softplus]
    for i in range(3):
        h = acts[i](g.add(g.matmul(h, g.input(f"W{i}")), g.input(f"b{i}")))
    g.set_output(g.sum(h))
    got = dc.evaluate(g, {**params, "x": x})[h]

    ref = np.tanh(x @ params["W0"] + params["b0"])
    ref = 1.0 / (1.0 + np.exp(-(ref @ params["W1"] + params["b1"])))
    ref = np.log1p(np.exp(ref @ params["W2"] + params["b2"]))
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_graph_errors():
    g = dc.Graph()
    g.set_output(g.add(g.input("a"), g.input("b")))
    with pytest.raises(dc.ShapeError):
        dc.evaluate(g, {"a": np.ones((2, 3)), "b": np.ones((2, 2))})
    with pytest.raises(dc.GraphError, match="missing leaf"):
        dc.evaluate(g, {"a": np.ones(2)})
    with pytest.raises(dc.GraphError):
        g.add(0, 99)
    with pytest.raises(dc.GraphError, match="scalar"):
        dc.value_and_gradients(g, {"a": np.ones(2), "b": np.ones(2)})
    with pytest.raises(dc.GraphError, match="no output"):
        dc.value_and_gradients(dc.Graph(), {})
    m = dc.Graph()
    m.set_output(m.sum(m.matmul(m.input("a"), m.input("b"))))
    with pytest.raises(dc.ShapeError):
        dc.evaluate(m, {"a": np.ones((2, 3)), "b": np.ones((2, 3))})


def test_non_finite_values_are_reported():
    g = dc.Graph()
    g.set_output(g.sum(g.exp(g.input("x"))))
    with pytest.raises(dc.NonFiniteError):
        dc.evaluate(g, {"x": np.array([1000.0])})
    g2 = dc.Graph()
    g2.set_output(g2.sum(g2.exp(g2.input("x"), clamp=50.0)))
    assert np.isfinite(dc.evaluate(g2, {"x": np.array([1000.0])})[-1])


def test_clip_global_norm():
    grads = {"a": np.array([6.0, 0.0]), "b": np.array([[8.0]])}  # norm 10
    clipped = dc.clip_global_norm(grads, 5.0)
    np.testing.assert_array_equal(clipped["a"], [3.0, 0.0])
    np.testing.assert_array_equal(clipped["b"], [[4.0]])
    small = {"a": np.array([3.0])}
    assert dc.clip_global_norm(small, 5.0)["a"] is small["a"]
    zero = dc.clip_global_norm({"a": np.zeros(3)}, 5.0)
    assert not np.any(zero["a"])
    with pytest.raises(ValueError):
        dc.clip_global_norm(grads, 0.0)
    with pytest.raises(dc.NonFiniteError):
        dc.clip_global_norm({"a": np.array([np.nan])}, 1.0)


def test_momentum_first_step_and_accumulation():
    opt = dc.momentum_optimizer(0.1, 0.9)
    p = {"w": np.array([1.0])}
    p = dc.optimizer_step(opt, p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(0.9)
    p = dc.optimizer_step(opt, p, {"w": np.array([1.0])})
    assert p["w"][0] == pytest.approx(0.9 - 0.1 * 1.9)


@pytest.mark.parametrize("g", [0.5, -2.0, 50.0])
def test_adam_first_step_is_lr_sized(g):
    opt = dc.adam_optimizer(1e-3)
    p = dc.optimizer_step(opt, {"w": np.zeros(1)}, {"w": np.array([g])})
    assert abs(p["w"][0]) == pytest.approx(1e-3, abs=1e-9)
    assert np.sign(p["w"][0]) == -np.sign(g)


def test_staircase_schedule():
    sched = dc.StaircaseSchedule(1e-4, 0.9, 2000)
    assert sched(4000) == pytest.approx(8.1e-5)
    assert sched(3999) == pytest.approx(9e-5)
    assert sched(0) == 1e-4


def test_zero_learning_rate_leaves_params_unchanged():
    opt = dc.momentum_optimizer(0.0)
    p = {"w": np.array([1.0, -2.0])}
    for _ in range(5):
        p = dc.optimizer_step(opt, p, {"w": np.array([3.0, 4.0])})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_optimizer_rejects_shape_mismatch():
    with pytest.raises(dc.ShapeError):
        dc.optimizer_step(dc.adam_optimizer(0.1), {"w": np.zeros(2)}, {"w": np.zeros(3)})
    with pytest.raises(ValueError):
        dc.OptimizerState("sgd", dc.StaircaseSchedule(0.1))


def test_initializers():
    rng = np.random.default_rng(0)
    assert not np.any(dc.init_tensor((2, 2), "zeros", rng))
    w = dc.init_tensor((100, 100), "glorot_uniform", rng)
    assert np.max(np.abs(w)) <= math.sqrt(6.0 / 200.0)
    he = dc.init_tensor((4, 10000), "he_normal", rng)
    assert abs(he.std() / math.sqrt(2.0 / 4.0) - 1.0) < 0.05
    with pytest.raises(ValueError):
        dc.init_tensor((0, 3), "glorot_uniform", rng)
    with pytest.raises(ValueError):
        dc.init_tensor((3,), "orthogonal", rng)
