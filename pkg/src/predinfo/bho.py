"""Brownian harmonic oscillator: Euler-discretised damped, noise-driven oscillator.

    x_{t+1} = x_t + v_t dt
    v_{t+1} = (1 - gamma dt) v_t - omega^2 x_t dt + xi_t sqrt(D dt),   xi_t ~ N(0, 1)

Because the update is linear-Gaussian, stationary and windowed second-order
statistics are exact and available in closed form.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .gib import GaussianJoint

CHUNK = 4096  # trajectories per independently seeded block


class UnstableDynamicsError(ValueError):
    pass


@dataclass(frozen=True)
class BHOParams:
    omega: float = 1.5 * 2.0 * math.pi
    gamma: float = 20.0
    D: float = 1000.0
    dt: float = 0.01667

    def __post_init__(self):
        if self.dt < 0 or self.omega < 0 or self.D < 0 or self.gamma < 0:
            raise ValueError(f"invalid BHO parameters {self}")
        if self.gamma * self.dt >= 1.0:
            raise ValueError("gamma * dt must be < 1")


@dataclass(frozen=True)
class WindowSpec:
    """Past window ``[split - t_past, split)`` and future ``[split, split + t_future)``."""

    t_past: int = 18
    t_future: int = 18
    total_len: int = 100
    split_index: int = 82

    def __post_init__(self):
        if self.t_past < 1 or self.t_future < 1:
            raise ValueError("windows must be non-empty")
        if self.split_index < self.t_past or self.split_index + self.t_future > self.total_len:
            raise ValueError(f"window {self} does not fit the sequence")

    @classmethod
    def centered(cls, t_past: int = 18, t_future: int = 18) -> "WindowSpec":
        """Window occupying a whole ``t_past + t_future`` sequence, split in the middle."""
        return cls(t_past, t_future, t_past + t_future, t_past)

    def past(self, seqs: np.ndarray) -> np.ndarray:
        return seqs[:, self.split_index - self.t_past : self.split_index]

    def future(self, seqs: np.ndarray) -> np.ndarray:
        return seqs[:, self.split_index : self.split_index + self.t_future]


@dataclass
class TrajectoryBatch:
    data: np.ndarray  # (n_traj, n_steps, 2): position, velocity
    seed: int
    params: BHOParams

    @property
    def positions(self) -> np.ndarray:
        """(n_traj, n_steps, 1) observed sequences."""
        return self.data[:, :, :1]


def transition(params: BHOParams) -> tuple[np.ndarray, np.ndarray]:
    """Update matrix A and per-step noise covariance Q of the (x, v) state."""
    dt = params.dt
    a = np.array([[1.0, dt], [-params.omega**2 * dt, 1.0 - params.gamma * dt]])
    q = np.array([[0.0, 0.0], [0.0, params.D * dt]])
    return a, q


def spectral_radius(params: BHOParams) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(transition(params)[0]))))


def _require_stable(params: BHOParams) -> None:
    rho = spectral_radius(params)
    if rho >= 1.0:
        raise UnstableDynamicsError(f"spectral radius {rho:.6g} >= 1; no stationary distribution")


def stationary_covariance(params: BHOParams) -> np.ndarray:
    """Solve S = A S A^T + Q through (I - A kron A) vec(S) = vec(Q)."""
    _require_stable(params)
    a, q = transition(params)
    s = np.linalg.solve(np.eye(4) - np.kron(a, a), q.ravel()).reshape(2, 2)
    return 0.5 * (s + s.T)


def lyapunov_residual(params: BHOParams, sigma: np.ndarray) -> float:
    a, q = transition(params)
    return float(np.linalg.norm(sigma - a @ sigma @ a.T - q))


def _stationary_factor(params: BHOParams) -> np.ndarray:
    # eigen-factorisation rather than Cholesky: S is singular when D = 0
    w, u = np.linalg.eigh(stationary_covariance(params))
    return u * np.sqrt(np.clip(w, 0.0, None))


def _simulate_block(a, noise_scale, chol, n, n_steps, stationary, seed_seq):
    rng = np.random.default_rng(seed_seq)
    out = np.empty((n, n_steps, 2))
    state = rng.standard_normal((n, 2)) @ chol.T if stationary else np.zeros((n, 2))
    out[:, 0] = state
    xi = rng.standard_normal((n, n_steps - 1))
    for t in range(1, n_steps):
        state = state @ a.T
        state[:, 1] += noise_scale * xi[:, t - 1]
        out[:, t] = state
    return out


def simulate(
    params: BHOParams,
    n_traj: int,
    n_steps: int,
    seed: int,
    init: str = "stationary",
    workers: int = 1,
) -> TrajectoryBatch:
    """Simulate ``n_traj`` trajectories of ``n_steps`` states (the first is the initial state).

    Trajectories are generated in blocks of ``CHUNK`` with seeds spawned from
    ``seed``, so the output does not depend on ``workers``.
    """
    if n_traj < 1 or n_steps < 1:
        raise ValueError("n_traj and n_steps must be >= 1")
    if init not in ("stationary", "zero"):
        raise ValueError(f"unknown init {init!r}")
    a, _ = transition(params)
    chol = _stationary_factor(params) if init == "stationary" else np.zeros((2, 2))
    noise_scale = math.sqrt(params.D * params.dt)
    sizes = [min(CHUNK, n_traj - i) for i in range(0, n_traj, CHUNK)]
    seeds = np.random.SeedSequence(seed).spawn(len(sizes))
    jobs = [(a, noise_scale, chol, n, n_steps, init == "stationary", ss) for n, ss in zip(sizes, seeds)]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            blocks = list(pool.map(lambda j: _simulate_block(*j), jobs))
    else:
        blocks = [_simulate_block(*j) for j in jobs]
    return TrajectoryBatch(np.concatenate(blocks, axis=0), seed, params)


def position_autocovariance(params: BHOParams, max_lag: int) -> np.ndarray:
    """Cov(x_{t+k}, x_t) for k = 0..max_lag, the (0, 0) entry of A^k S."""
    s = stationary_covariance(params)
    a, _ = transition(params)
    out = np.empty(max_lag + 1)
    m = s
    for k in range(max_lag + 1):
        out[k] = m[0, 0]
        m = a @ m
    return out


def window_covariances(params: BHOParams, spec: WindowSpec = WindowSpec()) -> GaussianJoint:
    """Exact joint covariance of the past and future position windows."""
    n = spec.t_past + spec.t_future
    c = position_autocovariance(params, n - 1)
    idx = np.arange(n)
    full = c[np.abs(idx[:, None] - idx[None, :])]
    p = spec.t_past
    return GaussianJoint(full[:p, :p], full[p:, p:], full[:p, p:])


class BHOSource:
    """Online generator of fresh stationary position sequences."""

    def __init__(self, params: BHOParams = BHOParams(), seq_len: int = 100):
        self.params = params
        self.seq_len = seq_len
        self._chol = _stationary_factor(params)
        self._a = transition(params)[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """(n, seq_len, 1) positions, drawn from ``rng``."""
        state = rng.standard_normal((n, 2)) @ self._chol.T
        scale = math.sqrt(self.params.D * self.params.dt)
        xi = rng.standard_normal((n, self.seq_len - 1))
        out = np.empty((n, self.seq_len, 1))
        out[:, 0, 0] = state[:, 0]
        for t in range(1, self.seq_len):
            state = state @ self._a.T
            state[:, 1] += scale * xi[:, t - 1]
            out[:, t, 0] = state[:, 0]
        return out
