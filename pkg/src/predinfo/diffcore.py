"""Static-graph reverse-mode differentiation over float64 numpy arrays.

A :class:`Graph` is built once (by calling the builder methods, each of which
returns an integer node id) and then evaluated repeatedly with fresh leaf
values.  Only the shapes needed by the models in this package are supported:
2-D matrices, 1-D vectors (row-broadcast as biases) and scalars.

Example::

    g = Graph()
    x = g.input("x")
    w = g.input("w")
    g.set_output(g.sum(g.tanh(g.matmul(x, w))))
    loss, grads = value_and_gradients(g, {"x": x_val, "w": w_val})
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import expit

LOG_2PI = math.log(2.0 * math.pi)


class GraphError(ValueError):
    """Malformed graph or leaf set."""


class ShapeError(GraphError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A node produced NaN or Inf."""


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# broadcasting helpers: equal shapes, (n, m) with (m,), or anything with ()


def _check_broadcast(op, a, b):
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]:
        return
    if len(sb) == 2 and len(sa) == 1 and sb[1] == sa[0]:
        return
    raise ShapeError(f"{op}: cannot combine shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


# ---------------------------------------------------------------------------
# op table: forward(*input_values, **attrs) and
# backward(grad_out, out_value, *input_values, **attrs) -> tuple of input grads


def _matmul_fwd(a, b, transpose_b=False):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    bb = b.T if transpose_b else b
    if a.shape[1] != bb.shape[0]:
        raise ShapeError(f"matmul: inner dims differ in {a.shape} @ {bb.shape}")
    return a @ bb


def _matmul_bwd(g, out, a, b, transpose_b=False):
    if transpose_b:
        return g @ b, g.T @ a
    return g @ b.T, a.T @ g


def _add_fwd(a, b):
    _check_broadcast("add", a, b)
    return a + b


def _add_bwd(g, out, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _sub_fwd(a, b):
    _check_broadcast("sub", a, b)
    return a - b


def _sub_bwd(g, out, a, b):
    return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)


def _mul_fwd(a, b):
    _check_broadcast("mul", a, b)
    return a * b


def _mul_bwd(g, out, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _scale_fwd(a, factor=1.0, shift=0.0):
    out = a * factor
    if shift:
        out = out + shift
    return out


def _scale_bwd(g, out, a, factor=1.0, shift=0.0):
    return (g * factor,)


def _tanh_bwd(g, out, a):
    return (g * (1.0 - out * out),)


def _sigmoid_bwd(g, out, a):
    return (g * out * (1.0 - out),)


def _relu_bwd(g, out, a):
    return (g * (a > 0.0),)


def _exp_fwd(a, clamp=None):
    return np.exp(a if clamp is None else np.minimum(a, clamp))


def _exp_bwd(g, out, a, clamp=None):
    if clamp is None:
        return (g * out,)
    return (g * out * (a < clamp),)


def _softplus_bwd(g, out, a):
    return (g * expit(a),)


def _logsumexp_fwd(a, axis=1, mean=False):
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis=axis)
    if mean:
        out = out - math.log(a.shape[axis])
    return out


def _logsumexp_bwd(g, out, a, axis=1, mean=False):
    m = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - m)
    soft = e / np.sum(e, axis=axis, keepdims=True)
    return (np.expand_dims(g, axis) * soft,)


def _sum_fwd(a, axis=None):
    return np.asarray(np.sum(a, axis=axis))


def _sum_bwd(g, out, a, axis=None):
    if axis is None:
        return (np.full(a.shape, float(g)),)
    return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


def _mean_fwd(a, axis=None):
    return np.asarray(np.mean(a, axis=axis))


def _mean_bwd(g, out, a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    (ga,) = _sum_bwd(g, out, a, axis)
    return (ga / n,)


def _gld_fwd(x, mean, sigma):
    if x.shape != mean.shape or x.ndim != 2:
        raise ShapeError(f"gaussian_log_density: {x.shape} vs {mean.shape}")
    d = x.shape[1]
    r = (x - mean) / sigma
    return -0.5 * np.sum(r * r, axis=1) - d * (math.log(sigma) + 0.5 * LOG_2PI)


def _gld_bwd(g, out, x, mean, sigma):
    gx = -(x - mean) / (sigma * sigma) * g[:, None]
    return gx, -gx


def _concat_fwd(*parts, axis=0):
    return np.concatenate(parts, axis=axis)


def _concat_bwd(g, out, *parts, axis=0):
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _slice_fwd(a, start, stop, axis=1):
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return a[tuple(idx)]


def _slice_bwd(g, out, a, start, stop, axis=1):
    ga = np.zeros_like(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    ga[tuple(idx)] = g
    return (ga,)


def _diag_fwd(a):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diag needs a square matrix, got {a.shape}")
    return np.diagonal(a).copy()


def _diag_bwd(g, out, a):
    return (np.diag(g),)


_OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "scale": (_scale_fwd, _scale_bwd),
    "tanh": (np.tanh, _tanh_bwd),
    "sigmoid": (expit, _sigmoid_bwd),
    "relu": (lambda a: np.maximum(a, 0.0), _relu_bwd),
    "exp": (_exp_fwd, _exp_bwd),
    "softplus": (lambda a: np.logaddexp(0.0, a), _softplus_bwd),
    "logsumexp": (_logsumexp_fwd, _logsumexp_bwd),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "gaussian_log_density": (_gld_fwd, _gld_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "slice": (_slice_fwd, _slice_bwd),
    "diag": (_diag_fwd, _diag_bwd),
}


class Graph:
    """Builder for a static computation graph with a single scalar output."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.output: int | None = None

    def _add(self, op: str, inputs: Iterable[int], **attrs) -> int:
        inputs = tuple(int(i) for i in inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{op}: unknown input node {i}")
        self.nodes.append(Node(op, inputs, attrs))
        return len(self.nodes) - 1

    # leaves
    def input(self, name: str) -> int:
        if name in self.inputs:
            return self.inputs[name]
        node = self._add("input", (), name=name)
        self.inputs[name] = node
        return node

    def const(self, value) -> int:
        return self._add("const", (), value=np.asarray(value, dtype=np.float64))

    # ops
    def matmul(self, a: int, b: int, transpose_b: bool = False) -> int:
        return self._add("matmul", (a, b), transpose_b=transpose_b)

    def add(self, a: int, b: int) -> int:
        return self._add("add", (a, b))

    def sub(self, a: int, b: int) -> int:
        return self._add("sub", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self._add("mul", (a, b))

    def scale(self, a: int, factor: float, shift: float = 0.0) -> int:
        """``factor * a + shift`` with python-float coefficients."""
        return self._add("scale", (a,), factor=float(factor), shift=float(shift))

    def tanh(self, a: int) -> int:
        return self._add("tanh", (a,))

    def sigmoid(self, a: int) -> int:
        return self._add("sigmoid", (a,))

    def relu(self, a: int) -> int:
        return self._add("relu", (a,))

    def exp(self, a: int, clamp: float | None = None) -> int:
        return self._add("exp", (a,), clamp=clamp)

    def softplus(self, a: int) -> int:
        return self._add("softplus", (a,))

    def logsumexp(self, a: int, axis: int = 1, mean: bool = False) -> int:
        """Row (axis=1) or column (axis=0) logsumexp; ``mean=True`` subtracts log n."""
        return self._add("logsumexp", (a,), axis=axis, mean=mean)

    def sum(self, a: int, axis: int | None = None) -> int:
        return self._add("sum", (a,), axis=axis)

    def mean(self, a: int, axis: int | None = None) -> int:
        return self._add("mean", (a,), axis=axis)

    def gaussian_log_density(self, x: int, mean: int, sigma: float) -> int:
        """Per-row log N(x; mean, sigma^2 I); output has shape (rows,)."""
        if not sigma > 0:
            raise GraphError("gaussian_log_density needs sigma > 0")
        return self._add("gaussian_log_density", (x, mean), sigma=float(sigma))

    def concat(self, parts: Iterable[int], axis: int = 0) -> int:
        parts = tuple(parts)
        if not parts:
            raise GraphError("concat of nothing")
        return self._add("concat", parts, axis=axis)

    def slice(self, a: int, start: int, stop: int, axis: int = 1) -> int:
        return self._add("slice", (a,), start=int(start), stop=int(stop), axis=axis)

    def diag(self, a: int) -> int:
        return self._add("diag", (a,))

    def set_output(self, node: int) -> int:
        if not 0 <= node < len(self.nodes):
            raise GraphError(f"unknown output node {node}")
        self.output = node
        return node

    def __len__(self) -> int:
        return len(self.nodes)


def evaluate(graph: Graph, leaves: Mapping[str, np.ndarray], check_finite: bool = True) -> list[np.ndarray]:
    """Value of every node, indexed by node id."""
    values: list[np.ndarray] = []
    for node in graph.nodes:
        if node.op == "input":
            name = node.attrs["name"]
            if name not in leaves:
                raise GraphError(f"missing leaf {name!r}")
            val = np.asarray(leaves[name], dtype=np.float64)
        elif node.op == "const":
            val = node.attrs["value"]
        else:
            fwd = _OPS[node.op][0]
            args = [values[i] for i in node.inputs]
            with np.errstate(over="ignore", invalid="ignore"):
                val = fwd(*args, **node.attrs)
            if check_finite and not np.all(np.isfinite(val)):
                raise NonFiniteError(f"non-finite value produced by {node.op} node")
        values.append(val)
    return values


def value_and_gradients(
    graph: Graph,
    leaves: Mapping[str, np.ndarray],
    wrt: Iterable[str] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Scalar output value and its exact derivative with respect to named leaves."""
    if graph.output is None:
        raise GraphError("graph has no output")
    values = evaluate(graph, leaves)
    out = values[graph.output]
    if out.shape != ():
        raise GraphError(f"gradients need a scalar output, got shape {out.shape}")

    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[graph.output] = np.asarray(1.0)
    for nid in range(graph.output, -1, -1):
        g = grads[nid]
        node = graph.nodes[nid]
        if g is None or not node.inputs:
            continue
        bwd = _OPS[node.op][1]
        args = [values[i] for i in node.inputs]
        for i, gi in zip(node.inputs, bwd(g, values[nid], *args, **node.attrs)):
            grads[i] = gi if grads[i] is None else grads[i] + gi

    names = graph.inputs if wrt is None else {n: graph.inputs[n] for n in wrt}
    result = {}
    for name, nid in names.items():
        g = grads[nid]
        result[name] = np.zeros_like(values[nid]) if g is None else np.asarray(g, dtype=np.float64)
    return float(out), result


def gradients(graph: Graph, leaves: Mapping[str, np.ndarray], wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
    return value_and_gradients(graph, leaves, wrt)[1]


# ---------------------------------------------------------------------------
# training utilities


def global_norm(tensors: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(t * t)) for t in tensors.values()))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


@dataclass
class StaircaseSchedule:
    """``initial * decay_rate ** floor(step / decay_steps)``."""

    initial: float
    decay_rate: float = 1.0
    decay_steps: int = 1

    def __call__(self, step: int) -> float:
        return self.initial * self.decay_rate ** (step // self.decay_steps)


@dataclass
class OptimizerState:
    """Momentum (classical, non-Nesterov) or Adam with per-parameter slots.

    ``step`` counts applied updates; the schedule is queried with the count
    before the update, so the first update uses ``schedule(0)``.
    """

    kind: str
    schedule: StaircaseSchedule
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    slots: dict[str, tuple[np.ndarray, ...]] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if self.kind not in ("momentum", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def momentum_optimizer(lr: float, momentum: float = 0.9, decay_rate: float = 1.0, decay_steps: int = 1) -> OptimizerState:
    return OptimizerState("momentum", StaircaseSchedule(lr, decay_rate, decay_steps), momentum=momentum)


def adam_optimizer(lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState("adam", StaircaseSchedule(lr), beta1=beta1, beta2=beta2, eps=eps)


def optimizer_step(
    state: OptimizerState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """Apply one update; returns new parameter arrays and advances ``state``."""
    lr = state.schedule(state.step)
    t = state.step + 1
    new = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if state.kind == "momentum":
            (v,) = state.slots.get(name, (np.zeros_like(p),))
            v = state.momentum * v + g
            state.slots[name] = (v,)
            new[name] = p - lr * v
        else:
            m, v = state.slots.get(name, (np.zeros_like(p), np.zeros_like(p)))
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            state.slots[name] = (m, v)
            m_hat = m / (1.0 - state.beta1**t)
            v_hat = v / (1.0 - state.beta2**t)
            new[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.step = t
    return new


def init_tensor(shape, scheme: str, rng: np.random.Generator) -> np.ndarray:
    """Draw an initial parameter tensor.

    Fans follow the usual convention: for a 2-D ``(fan_in, fan_out)`` kernel the
    two dims, for a 1-D vector of length n both fans equal n.
    """
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape) or not shape:
        raise ValueError(f"invalid shape {shape} (zero fan)")
    if scheme == "zeros":
        return np.zeros(shape)
    fan_in = shape[0]
    fan_out = shape[1] if len(shape) > 1 else shape[0]
    if scheme == "glorot_uniform":
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    if scheme == "he_normal":
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    raise ValueError(f"unknown init scheme {scheme!r}")
