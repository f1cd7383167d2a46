"""Noise-injected recurrent sequence models.

The recurrent path carries the deterministic state h_t.  At every step a
stochastic readout z_t = h_t + sigma * eps_t feeds an affine Gaussian decoder
predicting x_{t+1} ~ N(W z_t + b, sigma_o^2 I).  Cell equations are written
once against a tiny op interface that is satisfied both by
:class:`~predinfo.diffcore.Graph` (for training) and by :class:`NumpyOps`
(for inference), so the two paths cannot drift apart.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from scipy.special import expit

from . import diffcore as dc
from .bho import WindowSpec

log = logging.getLogger(__name__)

CELLS = ("vanilla", "gru", "lstm")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RNNConfig:
    cell: str = "vanilla"
    hidden_dim: int = 32
    input_dim: int = 1
    noise_sigma: float = 0.0
    output_sigma: float = 0.1
    dropout_keep: float = 1.0
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.cell not in CELLS:
            raise ValueError(f"unknown cell {self.cell!r}; expected one of {CELLS}")
        if self.hidden_dim < 1 or self.input_dim < 1:
            raise ValueError("hidden_dim and input_dim must be >= 1")
        if self.activation != "tanh":
            raise ValueError("only the bounded tanh activation is supported")
        if self.noise_sigma < 0 or not self.output_sigma > 0:
            raise ValueError("need noise_sigma >= 0 and output_sigma > 0")
        if not 0 < self.dropout_keep <= 1:
            raise ValueError("dropout_keep must lie in (0, 1]")


@dataclass
class TrainConfig:
    objective: str = "mle"
    batch: int = 32
    steps: int = 2000
    lr: float = 1e-3
    momentum: float = 0.9
    decay_rate: float = 0.9
    decay_steps: int = 2000
    clip: float = 5.0
    train_noise: bool = True
    cpc_horizon: int = 30
    cpc_embed_dim: int = 16
    cpc_anchor_stride: int = 10
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.objective not in ("mle", "cpc"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.batch < 1 or self.steps < 0 or self.decay_steps < 1:
            raise ValueError("counts must be positive")
        if self.objective == "cpc" and self.cpc_horizon < 1:
            raise ValueError("cpc_horizon must be >= 1")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        base = dict(steps=20000, lr=1e-4, decay_rate=0.9, decay_steps=2000)
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# model


def _param_shapes(cfg: RNNConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.input_dim, cfg.hidden_dim
    if cfg.cell == "vanilla":
        shapes = {"W_x": (d, h), "W_h": (h, h), "b": (h,)}
    elif cfg.cell == "gru":
        # columns ordered [reset, update, candidate]
        shapes = {"W_x": (d, 3 * h), "W_h": (h, 2 * h), "W_hc": (h, h), "b": (3 * h,)}
    else:
        # columns ordered [input, forget, cell, output]
        shapes = {"W_x": (d, 4 * h), "W_h": (h, 4 * h), "b": (4 * h,)}
    shapes.update({"W_dec": (h, d), "b_dec": (d,)})
    return shapes


@dataclass
class RNNModel:
    config: RNNConfig
    params: dict[str, np.ndarray]
    _graphs: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def create(cls, config: RNNConfig) -> "RNNModel":
        """Glorot-uniform kernels, zero biases (LSTM forget bias 1)."""
        rng = np.random.default_rng(config.seed)
        params = {}
        for name, shape in _param_shapes(config).items():
            params[name] = dc.init_tensor(shape, "zeros" if len(shape) == 1 else "glorot_uniform", rng)
        if config.cell == "lstm":
            h = config.hidden_dim
            params["b"][h : 2 * h] = 1.0
        return cls(config, params)

    def add_cpc_head(self, horizon: int, embed_dim: int, seed: int | None = None) -> None:
        """Input embedding ``cpc_emb`` and per-offset linear readouts ``cpc_pred``."""
        if "cpc_pred" in self.params and self.params["cpc_pred"].shape[1] == horizon * embed_dim:
            return
        rng = np.random.default_rng(self.config.seed + 7919 if seed is None else seed)
        d, h = self.config.input_dim, self.config.hidden_dim
        self.params["cpc_emb"] = dc.init_tensor((d, embed_dim), "glorot_uniform", rng)
        self.params["cpc_pred"] = dc.init_tensor((h, horizon * embed_dim), "glorot_uniform", rng)

    @property
    def core_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("cpc_")]

    def copy(self) -> "RNNModel":
        return RNNModel(RNNConfig(**asdict(self.config)), {k: v.copy() for k, v in self.params.items()})


# ---------------------------------------------------------------------------
# cell equations


class Ops(Protocol):
    def matmul(self, a, b): ...
    def add(self, a, b): ...
    def sub(self, a, b): ...
    def mul(self, a, b): ...
    def tanh(self, a): ...
    def sigmoid(self, a): ...
    def slice(self, a, start, stop, axis=1): ...


class NumpyOps:
    """Eager numpy twin of the graph builder's op subset used by the cells."""

    @staticmethod
    def matmul(a, b, transpose_b=False):
        return a @ (b.T if transpose_b else b)

    add = staticmethod(np.add)
    sub = staticmethod(np.subtract)
    mul = staticmethod(np.multiply)
    tanh = staticmethod(np.tanh)
    sigmoid = staticmethod(expit)

    @staticmethod
    def slice(a, start, stop, axis=1):
        return a[:, start:stop] if axis == 1 else a[start:stop]


NP_OPS = NumpyOps()


def cell_equations(ops: Ops, cell: str, p, x, h, c, hidden: int):
    """One recurrent step; returns (h_new, c_new).  ``c`` is only used by LSTM."""
    H = hidden
    if cell == "vanilla":
        pre = ops.add(ops.add(ops.matmul(x, p["W_x"]), ops.matmul(h, p["W_h"])), p["b"])
        return ops.tanh(pre), c
    if cell == "gru":
        xa = ops.add(ops.matmul(x, p["W_x"]), p["b"])
        gates = ops.sigmoid(ops.add(ops.slice(xa, 0, 2 * H), ops.matmul(h, p["W_h"])))
        r = ops.slice(gates, 0, H)
        u = ops.slice(gates, H, 2 * H)
        cand = ops.tanh(ops.add(ops.slice(xa, 2 * H, 3 * H), ops.matmul(ops.mul(r, h), p["W_hc"])))
        # u * h + (1 - u) * cand
        return ops.add(cand, ops.mul(u, ops.sub(h, cand))), c
    z = ops.add(ops.add(ops.matmul(x, p["W_x"]), ops.matmul(h, p["W_h"])), p["b"])
    i = ops.sigmoid(ops.slice(z, 0, H))
    f = ops.sigmoid(ops.slice(z, H, 2 * H))
    g = ops.tanh(ops.slice(z, 2 * H, 3 * H))
    o = ops.sigmoid(ops.slice(z, 3 * H, 4 * H))
    c_new = ops.add(ops.mul(f, c), ops.mul(i, g))
    return ops.mul(o, ops.tanh(c_new)), c_new


def initial_state(model: RNNModel, n: int) -> tuple[np.ndarray, np.ndarray]:
    H = model.config.hidden_dim
    return np.zeros((n, H)), np.zeros((n, H))


def cell_step(model: RNNModel, state, x_t: np.ndarray, training: bool = False, rng=None):
    """Advance ``state = (h, c)`` by one input; returns ``((h, c), output)``.

    ``output`` is h with inverted dropout applied when ``training`` and
    ``dropout_keep < 1``; the recurrent state itself is never dropped.
    """
    h, c = state
    cfg = model.config
    if x_t.ndim != 2 or x_t.shape[1] != cfg.input_dim or h.shape != (x_t.shape[0], cfg.hidden_dim):
        raise ValueError(f"shape mismatch: x {x_t.shape}, h {h.shape}")
    h, c = cell_equations(NP_OPS, cfg.cell, model.params, x_t, h, c, cfg.hidden_dim)
    out = h
    if training and cfg.dropout_keep < 1.0:
        out = h * (rng.random(h.shape) < cfg.dropout_keep) / cfg.dropout_keep
    return (h, c), out


def run(model: RNNModel, seqs: np.ndarray, steps: int | None = None, keep_all: bool = False):
    """Deterministic forward over the first ``steps`` inputs of ``seqs`` (n, T, d).

    Returns the final ``(h, c)``, plus the (steps, n, H) stack of states when
    ``keep_all``.
    """
    seqs = np.asarray(seqs, dtype=np.float64)
    steps = seqs.shape[1] if steps is None else steps
    state = initial_state(model, seqs.shape[0])
    hs = []
    for t in range(steps):
        state, _ = cell_step(model, state, seqs[:, t])
        if keep_all:
            hs.append(state[0])
    return (state, np.stack(hs)) if keep_all else state


def noisy_readout(h: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return h.copy()
    return h + sigma * rng.standard_normal(h.shape)


def readout_log_density(z: np.ndarray, h: np.ndarray, sigma: float) -> np.ndarray:
    """Row-wise log N(z; h, sigma^2 I)."""
    d = h.shape[-1]
    r = (z - h) / sigma
    return -0.5 * np.sum(r * r, axis=-1) - d * (math.log(sigma) + 0.5 * dc.LOG_2PI)


def decode(model: RNNModel, z: np.ndarray) -> np.ndarray:
    """Predictive mean of the next input."""
    return z @ model.params["W_dec"] + model.params["b_dec"]


def decoder_log_density(model: RNNModel, z: np.ndarray, target: np.ndarray) -> np.ndarray:
    return readout_log_density(target, decode(model, z), model.config.output_sigma)


# ---------------------------------------------------------------------------
# training graphs


def _graph_params(g: dc.Graph, names) -> dict[str, int]:
    return {n: g.input(n) for n in names}


def _unroll(g: dc.Graph, cfg: RNNConfig, p, steps: int, dropout: bool):
    """Unroll the cell graph; returns per-step outputs (after dropout) and states."""
    h, c = g.input("h_init"), g.input("c_init")
    outs = []
    for t in range(steps):
        h, c = cell_equations(g, cfg.cell, p, g.input(f"x{t}"), h, c, cfg.hidden_dim)
        outs.append(g.mul(h, g.input(f"mask{t}")) if dropout else h)
    return outs


def build_mle_graph(cfg: RNNConfig, seq_len: int, noise: bool, dropout: bool) -> dc.Graph:
    g = dc.Graph()
    p = _graph_params(g, _param_shapes(cfg))
    outs = _unroll(g, cfg, p, seq_len - 1, dropout)
    zs = [g.add(o, g.input(f"noise{t}")) if noise else o for t, o in enumerate(outs)]
    z = g.concat(zs, axis=0)
    mean = g.add(g.matmul(z, p["W_dec"]), p["b_dec"])
    logp = g.gaussian_log_density(g.input("x_next"), mean, cfg.output_sigma)
    g.set_output(g.scale(g.mean(logp), -1.0))
    return g


def cpc_anchors(seq_len: int, horizon: int, stride: int) -> list[int]:
    last = seq_len - 1 - horizon
    if last < 0:
        raise ValueError(f"sequence length {seq_len} must exceed the horizon {horizon}")
    return list(range(last, -1, -stride))[::-1]


def build_cpc_graph(cfg: RNNConfig, seq_len: int, horizon: int, embed_dim: int, stride: int, noise: bool, dropout: bool) -> dc.Graph:
    g = dc.Graph()
    p = _graph_params(g, list(_param_shapes(cfg)) + ["cpc_emb", "cpc_pred"])
    anchors = cpc_anchors(seq_len, horizon, stride)
    outs = _unroll(g, cfg, p, anchors[-1] + 1, dropout)
    emb: dict[int, int] = {}
    terms = []
    for a in anchors:
        z = g.add(outs[a], g.input(f"noise{a}")) if noise else outs[a]
        pred = g.matmul(z, p["cpc_pred"])
        for k in range(1, horizon + 1):
            t = a + k
            if t not in emb:
                emb[t] = g.matmul(g.input(f"x{t}"), p["cpc_emb"])
            # scores[i, j] = f(x_j, z_i)
            s = g.matmul(g.slice(pred, (k - 1) * embed_dim, k * embed_dim), emb[t], transpose_b=True)
            terms.append(g.sub(g.diag(s), g.logsumexp(s, axis=1)))
    g.set_output(g.scale(g.mean(g.concat(terms, axis=0)), -1.0))
    return g


def _seq_leaves(model: RNNModel, seqs: np.ndarray, steps: int) -> dict[str, np.ndarray]:
    n = seqs.shape[0]
    h0, c0 = initial_state(model, n)
    leaves = dict(model.params)
    leaves["h_init"], leaves["c_init"] = h0, c0
    for t in range(steps):
        leaves[f"x{t}"] = seqs[:, t]
    return leaves


def _add_stochastic_leaves(leaves, model, n, times, noise_sigma, dropout, rng):
    H = model.config.hidden_dim
    if noise_sigma is not None:
        eps = rng.standard_normal((len(times), n, H))
        for i, t in enumerate(times):
            leaves[f"noise{t}"] = noise_sigma * eps[i]
    if dropout:
        keep = model.config.dropout_keep
        for t in range(max(times) + 1):
            leaves[f"mask{t}"] = (rng.random((n, H)) < keep) / keep


def _graph(model: RNNModel, key, builder):
    if key not in model._graphs:
        model._graphs[key] = builder()
    return model._graphs[key]


def _check_batch(model: RNNModel, seqs: np.ndarray, min_len: int) -> np.ndarray:
    seqs = np.asarray(seqs, dtype=np.float64)
    if seqs.ndim != 3 or seqs.shape[2] != model.config.input_dim:
        raise ValueError(f"expected (n, T, {model.config.input_dim}) sequences, got {seqs.shape}")
    if seqs.shape[1] < min_len:
        raise ValueError(f"sequences must have length >= {min_len}")
    return seqs


def _mle_graph_and_leaves(model, seqs, train_noise, rng, training):
    seqs = _check_batch(model, seqs, 2)
    n, T, d = seqs.shape
    dropout = training and model.config.dropout_keep < 1.0
    noise = bool(train_noise)
    g = _graph(model, ("mle", T, noise, dropout), lambda: build_mle_graph(model.config, T, noise, dropout))
    leaves = _seq_leaves(model, seqs, T - 1)
    leaves["x_next"] = seqs[:, 1:].transpose(1, 0, 2).reshape(-1, d)
    if noise or dropout:
        rng = np.random.default_rng() if rng is None else rng
        sigma = model.config.noise_sigma if noise else None
        _add_stochastic_leaves(leaves, model, n, list(range(T - 1)), sigma, dropout, rng)
    return g, leaves


def mle_loss_and_grads(
    model: RNNModel,
    seqs: np.ndarray,
    train_noise: bool = False,
    rng: np.random.Generator | None = None,
    training: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean next-step Gaussian NLL (nats per step per sequence) and parameter gradients.

    With ``train_noise`` the decoder reads z_t = h_t + sigma * eps_t; otherwise z_t = h_t.
    """
    g, leaves = _mle_graph_and_leaves(model, seqs, train_noise, rng, training)
    try:
        return dc.value_and_gradients(g, leaves, wrt=model.core_names)
    except dc.NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite MLE loss: {exc}") from exc


def mle_loss(model: RNNModel, seqs: np.ndarray, train_noise: bool = False, rng=None, training: bool = False) -> float:
    g, leaves = _mle_graph_and_leaves(model, seqs, train_noise, rng, training)
    try:
        return float(dc.evaluate(g, leaves)[g.output])
    except dc.NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite MLE loss: {exc}") from exc


def cpc_loss_and_grads(
    model: RNNModel,
    seqs: np.ndarray,
    horizon: int,
    rng: np.random.Generator | None = None,
    train_noise: bool = False,
    embed_dim: int = 16,
    stride: int = 10,
    training: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Contrastive loss: cross-entropy of picking the true future among the batch.

    Averaged over offsets k = 1..horizon and anchor times; equals
    ``log(batch) - I_NCE``, so constant scores give exactly ``log(batch)``.
    """
    seqs = _check_batch(model, seqs, horizon + 2)
    n, T, _ = seqs.shape
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    model.add_cpc_head(horizon, embed_dim)
    dropout = training and model.config.dropout_keep < 1.0
    noise = bool(train_noise)
    key = ("cpc", T, horizon, embed_dim, stride, noise, dropout)
    g = _graph(model, key, lambda: build_cpc_graph(model.config, T, horizon, embed_dim, stride, noise, dropout))
    leaves = _seq_leaves(model, seqs, T)
    anchors = cpc_anchors(T, horizon, stride)
    if noise or dropout:
        rng = np.random.default_rng() if rng is None else rng
        _add_stochastic_leaves(leaves, model, n, anchors, model.config.noise_sigma if noise else None, dropout, rng)
    try:
        return dc.value_and_gradients(g, leaves, wrt=list(model.params))
    except dc.NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite contrastive loss: {exc}") from exc


def cpc_loss(model: RNNModel, seqs: np.ndarray, horizon: int, rng=None, **kw) -> float:
    return cpc_loss_and_grads(model, seqs, horizon, rng, **kw)[0]


def cpc_infonce_by_offset(model: RNNModel, seqs: np.ndarray, horizon: int, embed_dim: int = 16, stride: int = 10) -> np.ndarray:
    """Deterministic InfoNCE estimate (nats) of the trained contrastive head for each offset."""
    from .miest import infonce

    seqs = _check_batch(model, seqs, horizon + 2)
    anchors = cpc_anchors(seqs.shape[1], horizon, stride)
    _, hs = run(model, seqs, anchors[-1] + 1, keep_all=True)
    out = np.zeros(horizon)
    for a in anchors:
        pred = hs[a] @ model.params["cpc_pred"]
        for k in range(1, horizon + 1):
            e = seqs[:, a + k] @ model.params["cpc_emb"]
            out[k - 1] += infonce(pred[:, (k - 1) * embed_dim : k * embed_dim] @ e.T)
    return out / len(anchors)


# ---------------------------------------------------------------------------
# training loop


class SequenceSource(Protocol):
    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray: ...


class CropSource:
    """Random fixed-length crops from a list of (T_i, d) sequences."""

    def __init__(self, sequences, seq_len: int):
        self.sequences = [np.asarray(s, dtype=np.float64) for s in sequences if len(s) >= seq_len]
        if not self.sequences:
            raise ValueError(f"no sequence of length >= {seq_len}")
        self.seq_len = seq_len

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(len(self.sequences), size=n)
        out = []
        for i in idx:
            s = self.sequences[i]
            start = rng.integers(len(s) - self.seq_len + 1)
            out.append(s[start : start + self.seq_len])
        return np.stack(out)


@dataclass
class TrainResult:
    model: RNNModel
    losses: np.ndarray
    checkpoints: list[str] = field(default_factory=list)


def train(
    model: RNNModel,
    source: SequenceSource,
    tc: TrainConfig,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Momentum SGD with global-norm clipping and a staircase learning rate.

    Deterministic given ``tc.seed`` (data and noise) and the model's init seed.
    """
    rng = np.random.default_rng(tc.seed)
    opt = dc.momentum_optimizer(tc.lr, tc.momentum, tc.decay_rate, tc.decay_steps)
    losses = np.empty(tc.steps)
    saved = []
    if tc.objective == "cpc":
        model.add_cpc_head(tc.cpc_horizon, tc.cpc_embed_dim)
    for step in range(tc.steps):
        seqs = source.sample(tc.batch, rng)
        if tc.objective == "mle":
            loss, grads = mle_loss_and_grads(model, seqs, tc.train_noise, rng)
        else:
            loss, grads = cpc_loss_and_grads(
                model, seqs, tc.cpc_horizon, rng, tc.train_noise, tc.cpc_embed_dim, tc.cpc_anchor_stride
            )
        if not math.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at step {step}")
        try:
            grads = dc.clip_global_norm(grads, tc.clip)
        except dc.NonFiniteError as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        model.params.update(dc.optimizer_step(opt, {k: model.params[k] for k in grads}, grads))
        losses[step] = loss
        if callback is not None:
            callback(step, loss)
        if tc.checkpoint_every and tc.checkpoint_dir and (step + 1) % tc.checkpoint_every == 0:
            path = Path(tc.checkpoint_dir) / f"step{step + 1:07d}.ckpt"
            save_checkpoint(model, path, meta={"step": step + 1, "loss": loss})
            saved.append(str(path))
    return TrainResult(model, losses, saved)


# ---------------------------------------------------------------------------
# evaluation-time utilities


@dataclass
class ReprBatch:
    x_past: np.ndarray  # (n, t_past, d)
    x_future: np.ndarray  # (n, t_future, d)
    h: np.ndarray  # (n, H) deterministic state after the last past input
    z: np.ndarray  # (n, H) noisy readout
    noise_sigma: float

    def __len__(self) -> int:
        return self.h.shape[0]

    def subset(self, idx) -> "ReprBatch":
        return ReprBatch(self.x_past[idx], self.x_future[idx], self.h[idx], self.z[idx], self.noise_sigma)


def collect_representations(
    model: RNNModel,
    seqs: np.ndarray,
    spec: WindowSpec,
    eval_sigma: float,
    rng: np.random.Generator,
) -> ReprBatch:
    """Run to ``spec.split_index`` inputs, read out h and draw z ~ N(h, eval_sigma^2 I)."""
    seqs = _check_batch(model, seqs, 1)
    if seqs.shape[1] < spec.split_index + spec.t_future:
        raise ValueError(f"sequences of length {seqs.shape[1]} do not cover {spec}")
    h, _ = run(model, seqs, spec.split_index)
    z = noisy_readout(h, eval_sigma, rng)
    return ReprBatch(spec.past(seqs).copy(), spec.future(seqs).copy(), h, z, eval_sigma)


def sequence_log_likelihood(model: RNNModel, seqs: np.ndarray) -> np.ndarray:
    """Per-sequence sum of log N(x_{t+1}; decode(h_t), sigma_o^2), noise-free readout."""
    seqs = _check_batch(model, seqs, 2)
    _, hs = run(model, seqs, seqs.shape[1] - 1, keep_all=True)
    means = hs @ model.params["W_dec"] + model.params["b_dec"]  # (T-1, n, d)
    targets = seqs[:, 1:].transpose(1, 0, 2)
    return readout_log_density(targets, means, model.config.output_sigma).sum(axis=0)


def generate(
    model: RNNModel,
    prefix: np.ndarray,
    n_steps: int,
    rng: np.random.Generator,
    sigma: float | None = None,
    output_sigma: float | None = None,
) -> np.ndarray:
    """Autoregressive continuation of ``prefix`` ((T0, d) or (n, T0, d)).

    Each step reads out z ~ N(h, sigma^2), samples x ~ N(decode(z), sigma_o^2)
    and feeds it back.  ``sigma`` and ``output_sigma`` default to the model's.
    """
    prefix = np.asarray(prefix, dtype=np.float64)
    single = prefix.ndim == 2
    if single:
        prefix = prefix[None]
    if prefix.shape[1] < 1:
        raise ValueError("prefix must contain at least one step")
    sigma = model.config.noise_sigma if sigma is None else sigma
    out_sigma = model.config.output_sigma if output_sigma is None else output_sigma
    state = initial_state(model, prefix.shape[0])
    for t in range(prefix.shape[1]):
        state, _ = cell_step(model, state, prefix[:, t])
    samples = []
    for _ in range(n_steps):
        mean = decode(model, noisy_readout(state[0], sigma, rng))
        x = mean + out_sigma * rng.standard_normal(mean.shape) if out_sigma > 0 else mean
        samples.append(x)
        state, _ = cell_step(model, state, x)
    result = np.stack(samples, axis=1) if samples else np.zeros((prefix.shape[0], 0, prefix.shape[2]))
    return result[0] if single else result


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout: MAGIC, then a little-endian uint64 header length, then a UTF-8 JSON
# header {"format", "config", "tensors": [{"name", "shape"}], "meta"}, then the
# tensors' float64 little-endian C-order data concatenated in header order.

MAGIC = b"PREDINFO-CKPT\n"


def save_checkpoint(model: RNNModel, path, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(model.params)
    header = {
        "format": 1,
        "config": asdict(model.config),
        "tensors": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[RNNModel, dict]:
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (size,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(size))
        params = {}
        for t in header["tensors"]:
            count = int(np.prod(t["shape"], dtype=np.int64))
            data = np.frombuffer(f.read(8 * count), dtype="<f8")
            if data.size != count:
                raise ValueError(f"{path}: truncated tensor {t['name']!r}")
            params[t["name"]] = data.astype(np.float64).reshape(t["shape"])
    return RNNModel(RNNConfig(**header["config"]), params), header.get("meta", {})
