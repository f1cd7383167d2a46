"""Mutual-information estimators.

Score matrices follow the convention ``scores[i, j] = f(x_j, z_i)``: row i
holds one representation scored against every candidate x in the batch, and
the diagonal holds the positive pairs.  All estimates are in nats.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from . import diffcore as dc

EXP_CLAMP = 50.0  # cap on scores inside exponentials (NWJ/JS)


# ---------------------------------------------------------------------------
# critic-based bounds


def _square(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"score matrix must be square, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite scores")
    return s


def infonce(scores) -> float:
    """mean_i [ f(x_i, z_i) - log (1/K) sum_j exp f(x_j, z_i) ]; never exceeds log K."""
    s = _square(scores)
    k = s.shape[0]
    return float(np.mean(np.diag(s) - logsumexp(s, axis=1)) + math.log(k))


def nwj(scores) -> float:
    """mean of diagonal f minus e^{-1} times the mean of off-diagonal e^f."""
    s = _square(scores)
    k = s.shape[0]
    if k < 2:
        raise ValueError("NWJ needs at least two samples")
    e = np.exp(np.minimum(s, EXP_CLAMP))
    off = (e.sum() - np.trace(e)) / (k * (k - 1))
    return float(np.mean(np.diag(s)) - off / math.e)


def js(scores) -> float:
    """NWJ evaluation of a critic trained with the Jensen-Shannon objective.

    The JS-optimal critic is the log density ratio, while NWJ is tight at one
    plus that ratio, hence the shift.
    """
    return nwj(_square(scores) + 1.0)


def js_objective(scores) -> float:
    """-E_joint softplus(-f) - E_marginal softplus(f), the quantity the JS critic maximises."""
    s = _square(scores)
    k = s.shape[0]
    sp = np.logaddexp(0.0, s)
    return float(-np.mean(np.logaddexp(0.0, -np.diag(s))) - (sp.sum() - np.trace(sp)) / (k * (k - 1)))


ESTIMATORS: dict[str, Callable[[np.ndarray], float]] = {"infonce": infonce, "nwj": nwj, "js": js}


# ---------------------------------------------------------------------------
# bounds from a tractable encoder


def cond_logpdf_matrix(z: np.ndarray, means: np.ndarray, sigma: float) -> np.ndarray:
    """``logp[i, j] = log N(z_i; means_j, sigma^2 I)``."""
    z = np.asarray(z, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    d = z.shape[1]
    sq = np.sum(z * z, axis=1)[:, None] + np.sum(means * means, axis=1)[None, :] - 2.0 * z @ means.T
    np.maximum(sq, 0.0, out=sq)
    diag = np.sum((z - means) ** 2, axis=1) if z.shape == means.shape else None
    if diag is not None:
        np.fill_diagonal(sq, diag)
    return -0.5 * sq / sigma**2 - d * (math.log(sigma) + 0.5 * math.log(2.0 * math.pi))


def minibatch_bounds(logp) -> tuple[float, float]:
    """Lower and upper bounds on I(Z; X) from a K x K conditional log-density matrix."""
    lp = np.asarray(logp, dtype=np.float64)
    k = lp.shape[0]
    if lp.ndim != 2 or lp.shape[1] != k:
        raise ValueError("logp must be square")
    if k < 2:
        raise ValueError("minibatch bounds need K >= 2")
    d = np.diag(lp)
    lower = np.mean(d - logsumexp(lp, axis=1)) + math.log(k)
    off = lp.copy()
    np.fill_diagonal(off, -np.inf)
    upper = np.mean(d - logsumexp(off, axis=1)) + math.log(k - 1)
    return float(lower), float(upper)


def minibatch_bounds_for(z: np.ndarray, means: np.ndarray, sigma: float, k: int | None = None) -> tuple[float, float]:
    """Bounds on the first ``k`` samples of ``z ~ N(means, sigma^2 I)``."""
    k = len(z) if k is None else min(k, len(z))
    return minibatch_bounds(cond_logpdf_matrix(z[:k], means[:k], sigma))


# ---------------------------------------------------------------------------
# variational (Barber-Agakov) bound


def gaussian_entropy(cov: np.ndarray) -> float:
    cov = np.atleast_2d(cov)
    sign, ld = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("covariance must be positive definite")
    return 0.5 * (cov.shape[0] * (1.0 + math.log(2.0 * math.pi)) + ld)


@dataclass
class BAEstimate:
    value: float
    is_bound: bool  # False when the entropy is unknown: value is only E[log q]


def ba_future_bound(log_q: np.ndarray, entropy_future: float | None) -> BAEstimate:
    """H(x_future) + E[log q(x_future | z)] given per-sample log q values."""
    cross = float(np.mean(log_q))
    if entropy_future is None:
        return BAEstimate(cross, False)
    return BAEstimate(entropy_future + cross, True)


@dataclass
class LinearGaussianDecoder:
    """q(y | z) = N(W z + b, C) fitted by least squares."""

    w: np.ndarray
    b: np.ndarray
    cov: np.ndarray

    @classmethod
    def fit(cls, z: np.ndarray, y: np.ndarray, ridge: float = 1e-8) -> "LinearGaussianDecoder":
        z = z.reshape(len(z), -1)
        y = y.reshape(len(y), -1)
        zc = np.column_stack([z, np.ones(len(z))])
        reg = ridge * np.eye(zc.shape[1])
        coef = np.linalg.solve(zc.T @ zc + reg, zc.T @ y)
        resid = y - zc @ coef
        cov = resid.T @ resid / len(y) + ridge * np.eye(y.shape[1])
        return cls(coef[:-1].T, coef[-1], cov)

    def log_prob(self, z: np.ndarray, y: np.ndarray) -> np.ndarray:
        z = z.reshape(len(z), -1)
        y = y.reshape(len(y), -1)
        r = y - z @ self.w.T - self.b
        chol = np.linalg.cholesky(self.cov)
        sol = np.linalg.solve(chol, r.T)
        d = y.shape[1]
        return -0.5 * np.sum(sol * sol, axis=0) - np.sum(np.log(np.diag(chol))) - 0.5 * d * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# separable critic


class SeparableCritic:
    """f(x, z) = g(x) . h(z) with two ReLU MLP towers.

    Kernels are Glorot-uniform and biases He-normal at initialisation.
    """

    def __init__(self, x_dim: int, z_dim: int, layers: Sequence[int] = (256, 256, 32), rng=None):
        rng = np.random.default_rng(rng)
        self.layers = tuple(layers)
        self.x_dim, self.z_dim = x_dim, z_dim
        self.params: dict[str, np.ndarray] = {}
        for side, dim in (("x", x_dim), ("z", z_dim)):
            fan_in = dim
            for i, width in enumerate(self.layers):
                self.params[f"{side}{i}_W"] = dc.init_tensor((fan_in, width), "glorot_uniform", rng)
                self.params[f"{side}{i}_b"] = dc.init_tensor((width,), "he_normal", rng)
                fan_in = width
        self._graphs: dict[tuple, dc.Graph] = {}

    def embed(self, side: str, data: np.ndarray) -> np.ndarray:
        out = np.asarray(data, dtype=np.float64).reshape(len(data), -1)
        for i in range(len(self.layers)):
            out = out @ self.params[f"{side}{i}_W"] + self.params[f"{side}{i}_b"]
            if i < len(self.layers) - 1:
                out = np.maximum(out, 0.0)
        return out

    def scores(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.embed("z", z) @ self.embed("x", x).T

    def _tower(self, g: dc.Graph, side: str) -> int:
        out = g.input(side)
        for i in range(len(self.layers)):
            out = g.add(g.matmul(out, g.input(f"{side}{i}_W")), g.input(f"{side}{i}_b"))
            if i < len(self.layers) - 1:
                out = g.relu(out)
        return out

    def objective_graph(self, estimator: str) -> dc.Graph:
        """Graph of the negated training objective (to minimise)."""
        if estimator in self._graphs:
            return self._graphs[estimator]
        g = dc.Graph()
        s = g.matmul(self._tower(g, "z"), self._tower(g, "x"), transpose_b=True)
        diag = g.diag(s)
        if estimator == "infonce":
            obj = g.mean(g.sub(diag, g.logsumexp(s, axis=1, mean=True)))
        elif estimator == "nwj":
            off = g.sum(g.mul(g.exp(s, clamp=EXP_CLAMP), g.input("offdiag")))
            obj = g.sub(g.mean(diag), g.scale(off, 1.0 / math.e))
        elif estimator == "js":
            joint = g.mean(g.softplus(g.scale(diag, -1.0)))
            marg = g.sum(g.mul(g.softplus(s), g.input("offdiag")))
            obj = g.scale(g.add(joint, marg), -1.0)
        else:
            raise ValueError(f"unknown estimator {estimator!r}")
        g.set_output(g.scale(obj, -1.0))
        self._graphs[estimator] = g
        return g

    def loss_and_grads(self, x: np.ndarray, z: np.ndarray, estimator: str = "infonce"):
        g = self.objective_graph(estimator)
        leaves = dict(self.params)
        leaves["x"] = x.reshape(len(x), -1)
        leaves["z"] = z.reshape(len(z), -1)
        if estimator in ("nwj", "js"):
            k = len(x)
            leaves["offdiag"] = (1.0 - np.eye(k)) / (k * (k - 1))
        return dc.value_and_gradients(g, leaves, wrt=list(self.params))

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def critic_estimate(critic: SeparableCritic, x: np.ndarray, z: np.ndarray, batch: int = 2048, estimator: str = "infonce") -> float:
    """Mean estimate over consecutive batches of size ``batch`` (one smaller batch if n < batch)."""
    n = len(x)
    if n == 0:
        raise ValueError("empty evaluation set")
    fn = ESTIMATORS[estimator]
    if n <= batch:
        return fn(critic.scores(x, z))
    vals = [fn(critic.scores(x[i : i + batch], z[i : i + batch])) for i in range(0, n - batch + 1, batch)]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# training with early stopping


@dataclass
class EarlyStopConfig:
    max_steps: int = 200000
    patience: int = 10000
    drop: float = 3.0
    train_batch: int = 256
    eval_batch: int = 2048
    lr: float = 1e-3
    eval_every: int = 500
    layers: tuple[int, ...] = (256, 256, 32)

    def __post_init__(self):
        if min(self.max_steps, self.patience, self.train_batch, self.eval_batch, self.eval_every) <= 0 or self.drop <= 0:
            raise ValueError("early-stopping settings must be positive")
        self.layers = tuple(self.layers)

    @classmethod
    def desk_scale(cls, **overrides) -> "EarlyStopConfig":
        base = dict(max_steps=3000, patience=1000, eval_every=100)
        base.update(overrides)
        return cls(**base)


class EarlyStopper:
    """Stop when the monitored estimate has not improved for ``patience`` steps
    or has fallen ``drop`` below its running best."""

    def __init__(self, patience: int, drop: float):
        self.patience, self.drop = patience, drop
        self.best = -math.inf
        self.best_step: int | None = None

    def update(self, step: int, value: float) -> bool:
        if value > self.best:
            self.best, self.best_step = value, step
            return False
        if value <= self.best - self.drop:
            return True
        return step - self.best_step >= self.patience


@dataclass
class CriticResult:
    critic: SeparableCritic
    stop_step: int
    best_step: int
    best_val: float
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (step, train, val)


PairSource = Callable[[int, np.random.Generator], tuple[np.ndarray, np.ndarray]]


def array_pairs(x: np.ndarray, z: np.ndarray) -> PairSource:
    """Sample minibatches (with replacement) from a finite paired set."""
    x = x.reshape(len(x), -1)
    z = z.reshape(len(z), -1)

    def sample(n, rng):
        idx = rng.integers(len(x), size=n)
        return x[idx], z[idx]

    return sample


def train_critic(
    train: PairSource | tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    cfg: EarlyStopConfig,
    rng: np.random.Generator,
    estimator: str = "infonce",
    train_eval: tuple[np.ndarray, np.ndarray] | None = None,
) -> CriticResult:
    """Adam-train a separable critic, monitoring the validation estimate.

    Returns the critic restored to its best validation checkpoint.  When
    ``train_eval`` is given its estimate is recorded alongside validation.
    """
    x_val, z_val = (a.reshape(len(a), -1) for a in val)
    if len(x_val) == 0:
        raise ValueError("empty validation set")
    sample = array_pairs(*train) if isinstance(train, tuple) else train
    critic = SeparableCritic(x_val.shape[1], z_val.shape[1], cfg.layers, rng)
    opt = dc.adam_optimizer(cfg.lr)
    stopper = EarlyStopper(cfg.patience, cfg.drop)
    best_state = critic.state()
    history = []
    step = 0
    for step in range(1, cfg.max_steps + 1):
        x, z = sample(cfg.train_batch, rng)
        _, grads = critic.loss_and_grads(x, z, estimator)
        critic.params = dc.optimizer_step(opt, critic.params, grads)
        if step % cfg.eval_every and step != cfg.max_steps:
            continue
        v = critic_estimate(critic, x_val, z_val, cfg.eval_batch, estimator)
        t = critic_estimate(critic, *train_eval, cfg.eval_batch, estimator) if train_eval is not None else math.nan
        history.append((step, t, v))
        improved = v > stopper.best
        stop = stopper.update(step, v)
        if improved:
            best_state = critic.state()
        if stop:
            break
    critic.params = best_state
    return CriticResult(critic, step, stopper.best_step, stopper.best, history)


# ---------------------------------------------------------------------------
# information-plane points


@dataclass
class InfoPlanePoint:
    model_id: str
    cell: str
    train_noise_sigma: float
    eval_noise_sigma: float
    seed: int
    i_past_lower: float
    i_past_upper: float
    i_future_nce: float
    critic_stop_step: int
    mode: str = ""
    dataset_id: str = ""
    i_past_nce: float = math.nan
    unbounded: bool = False

    def __post_init__(self):
        if not self.unbounded and self.i_past_lower > self.i_past_upper + 1e-12:
            raise ValueError("minibatch lower bound exceeds upper bound")


CSV_COLUMNS = [f.name for f in fields(InfoPlanePoint)]


def write_points_csv(points: Sequence[InfoPlanePoint], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for p in points:
            row = asdict(p)
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_points_csv(path) -> list[InfoPlanePoint]:
    types = {f.name: f.type for f in fields(InfoPlanePoint)}
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            kw = {}
            for k, v in row.items():
                t = types.get(k)
                if t is None:
                    continue
                if t in ("float", float):
                    kw[k] = float(v)
                elif t in ("int", int):
                    kw[k] = int(v)
                elif t in ("bool", bool):
                    kw[k] = v == "True"
                else:
                    kw[k] = v
            out.append(InfoPlanePoint(**kw))
    return out


@dataclass
class EstimateProtocol:
    mb_batch: int = 4096
    critic: EarlyStopConfig = field(default_factory=EarlyStopConfig)
    resample_noise: bool = True
    past_critic: bool = False
    seed: int = 0


def _repr_sampler(batch, which: str, resample: bool) -> PairSource:
    x = (batch.x_future if which == "future" else batch.x_past).reshape(len(batch), -1)
    h, z, sigma = batch.h, batch.z, batch.noise_sigma

    def sample(n, rng):
        idx = rng.integers(len(x), size=n)
        zz = h[idx] + sigma * rng.standard_normal((n, h.shape[1])) if resample else z[idx]
        return x[idx], zz

    return sample


def estimate_plane_point(
    train,
    val,
    test,
    protocol: EstimateProtocol | None = None,
    *,
    model_id: str = "",
    cell: str = "",
    train_noise_sigma: float = 0.0,
    seed: int = 0,
    mode: str = "",
    dataset_id: str = "",
) -> InfoPlanePoint:
    """Past information from minibatch bounds on ``test``, future information
    from a critic trained on ``train``, early-stopped on ``val`` and evaluated
    on ``test``.  Arguments are :class:`~predinfo.rnn.ReprBatch` splits."""
    protocol = protocol or EstimateProtocol()
    sigma = test.noise_sigma
    meta = dict(model_id=model_id, cell=cell, train_noise_sigma=train_noise_sigma, eval_noise_sigma=sigma,
                seed=seed, mode=mode, dataset_id=dataset_id)
    rng = np.random.default_rng(protocol.seed)
    if sigma <= 0:
        return InfoPlanePoint(i_past_lower=math.inf, i_past_upper=math.inf, i_future_nce=math.nan,
                              critic_stop_step=0, unbounded=True, **meta)
    lower, upper = minibatch_bounds_for(test.z, test.h, sigma, protocol.mb_batch)
    # the two bounds can cross by ~1e-8 when z is nearly independent of x; report a zero-width bar
    upper = max(upper, lower)
    cfg = protocol.critic
    res = train_critic(_repr_sampler(train, "future", protocol.resample_noise),
                       (val.x_future, val.z), cfg, rng)
    i_future = critic_estimate(res.critic, test.x_future, test.z, cfg.eval_batch)
    i_past_nce = math.nan
    if protocol.past_critic:
        res_p = train_critic(_repr_sampler(train, "past", protocol.resample_noise), (val.x_past, val.z), cfg, rng)
        i_past_nce = critic_estimate(res_p.critic, test.x_past, test.z, cfg.eval_batch)
    return InfoPlanePoint(i_past_lower=lower, i_past_upper=upper, i_future_nce=i_future,
                          critic_stop_step=res.stop_step, i_past_nce=i_past_nce, **meta)
