"""Analytic Gaussian Information Bottleneck.

For jointly Gaussian (X, Y) the optimal bottleneck T = A X + eps projects X on
the left eigenvectors of Sigma_{X|Y} Sigma_X^{-1} with the smallest
eigenvalues.  Everything here is in nats.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.optimize import brentq

LAMBDA_FLOOR = 1e-12  # deterministic directions are clipped to this eigenvalue
UNIT_TOL = 1e-12  # eigenvalues within this of 1 carry no information
SPECTRUM_SLACK = 1e-9  # rounding allowance on the [0, 1] eigenvalue range


class DegenerateSpectrumError(ValueError):
    pass


@dataclass
class GaussianJoint:
    sigma_x: np.ndarray
    sigma_y: np.ndarray
    sigma_xy: np.ndarray

    def __post_init__(self):
        self.sigma_x = np.asarray(self.sigma_x, dtype=np.float64)
        self.sigma_y = np.asarray(self.sigma_y, dtype=np.float64)
        self.sigma_xy = np.asarray(self.sigma_xy, dtype=np.float64)
        dx, dy = self.sigma_x.shape[0], self.sigma_y.shape[0]
        if self.sigma_x.shape != (dx, dx) or self.sigma_y.shape != (dy, dy) or self.sigma_xy.shape != (dx, dy):
            raise ValueError("inconsistent covariance shapes")

    @property
    def full(self) -> np.ndarray:
        return np.block([[self.sigma_x, self.sigma_xy], [self.sigma_xy.T, self.sigma_y]])

    def mutual_information(self) -> float:
        """I(X;Y) = 1/2 [log det Sx + log det Sy - log det S]."""
        return 0.5 * (_logdet(self.sigma_x) + _logdet(self.sigma_y) - _logdet(self.full))

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        w, u = np.linalg.eigh(self.full)
        factor = u * np.sqrt(np.clip(w, 0.0, None))
        s = rng.standard_normal((n, factor.shape[0])) @ factor.T
        dx = self.sigma_x.shape[0]
        return s[:, :dx], s[:, dx:]


@dataclass
class IBSpectrum:
    lambdas: np.ndarray  # ascending
    vs: np.ndarray  # rows are unit-norm left eigenvectors
    rs: np.ndarray  # v_i^T Sigma_X v_i
    degenerate: np.ndarray = field(default=None)  # lambda was clipped up to LAMBDA_FLOOR

    def __post_init__(self):
        if self.degenerate is None:
            self.degenerate = np.zeros(len(self.lambdas), dtype=bool)

    @property
    def mutual_information(self) -> float:
        return -0.5 * float(np.sum(np.log(self.clipped())))

    def clipped(self) -> np.ndarray:
        return np.clip(self.lambdas, LAMBDA_FLOOR, 1.0)


@dataclass
class LinearEncoder:
    a: np.ndarray
    sigma_eps: np.ndarray

    @classmethod
    def with_unit_noise(cls, a: np.ndarray) -> "LinearEncoder":
        return cls(a, np.eye(a.shape[0]))

    def encode(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Sample T = A x + eps for each row of ``x``."""
        chol = np.linalg.cholesky(self.sigma_eps)
        return x @ self.a.T + rng.standard_normal((x.shape[0], self.a.shape[0])) @ chol.T


def _logdet(m: np.ndarray) -> float:
    try:
        c = linalg.cholesky(m, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc
    return 2.0 * float(np.sum(np.log(np.diag(c))))


def conditional_covariance(joint: GaussianJoint) -> np.ndarray:
    """Sigma_{X|Y} = Sigma_X - Sigma_XY Sigma_Y^{-1} Sigma_XY^T."""
    try:
        cf = linalg.cho_factor(joint.sigma_y, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("Sigma_Y is singular") from exc
    c = joint.sigma_x - joint.sigma_xy @ linalg.cho_solve(cf, joint.sigma_xy.T)
    return 0.5 * (c + c.T)


def ib_spectrum(joint: GaussianJoint) -> IBSpectrum:
    """Left eigen-decomposition of Sigma_{X|Y} Sigma_X^{-1}.

    v^T M = lambda v^T is the symmetric-definite problem Sigma_{X|Y} v =
    lambda Sigma_X v; with Sigma_X = L L^T it becomes the symmetric eigenproblem
    of L^{-1} Sigma_{X|Y} L^{-T} with v = L^{-T} u.
    """
    try:
        chol = linalg.cholesky(joint.sigma_x, lower=True)
    except linalg.LinAlgError as exc:
        raise ValueError("Sigma_X is not positive definite") from exc
    cond = conditional_covariance(joint)
    tmp = linalg.solve_triangular(chol, cond, lower=True)
    sym = linalg.solve_triangular(chol, tmp.T, lower=True)
    sym = 0.5 * (sym + sym.T)
    lambdas, u = np.linalg.eigh(sym)
    v = linalg.solve_triangular(chol.T, u, lower=False).T
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    rs = np.einsum("ij,jk,ik->i", v, joint.sigma_x, v)
    return IBSpectrum(lambdas, v, rs, degenerate=lambdas < LAMBDA_FLOOR)


def eigen_residuals(joint: GaussianJoint, spectrum: IBSpectrum) -> np.ndarray:
    """||v_i^T M - lambda_i v_i^T|| for each (unit) eigenvector."""
    m = conditional_covariance(joint) @ np.linalg.inv(joint.sigma_x)
    return np.linalg.norm(spectrum.vs @ m - spectrum.lambdas[:, None] * spectrum.vs, axis=1)


def optimal_projection(spectrum: IBSpectrum, beta: float) -> LinearEncoder:
    """Optimal encoder at trade-off ``beta`` with unit noise covariance.

    Row i is alpha_i v_i^T with alpha_i^2 = max((beta (1 - l_i) - 1) / (l_i r_i), 0).
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    if np.any(spectrum.rs <= 0):
        raise DegenerateSpectrumError("non-positive r_i")
    lam = spectrum.clipped()
    alpha2 = np.maximum((beta * (1.0 - lam) - 1.0) / (lam * spectrum.rs), 0.0)
    return LinearEncoder.with_unit_noise(np.sqrt(alpha2)[:, None] * spectrum.vs)


def past_information_at_beta(spectrum: IBSpectrum, beta: float) -> float:
    """I(T;X) of the optimal encoder, 1/2 sum over active i of log((beta-1)(1-l_i)/l_i)."""
    lam = spectrum.clipped()
    active = beta * (1.0 - lam) > 1.0
    lam = lam[active]
    return 0.5 * float(np.sum(np.log((beta - 1.0) * (1.0 - lam) / lam)))


def beta_for_past_information(spectrum: IBSpectrum, i_past: float) -> float:
    """Trade-off parameter whose optimal encoder retains ``i_past`` nats."""
    if i_past <= 0:
        return 1.0 / (1.0 - spectrum.clipped()[0])
    lo = 1.0 / (1.0 - spectrum.clipped()[0])
    hi = 2.0 * lo
    while past_information_at_beta(spectrum, hi) < i_past:
        hi *= 2.0
        if hi > 1e300:
            raise ValueError("past information target unreachable")
    return brentq(lambda b: past_information_at_beta(spectrum, b) - i_past, lo, hi, xtol=1e-14, rtol=1e-15)


def _informative(spectrum: IBSpectrum) -> np.ndarray:
    lam = spectrum.clipped()
    return lam[lam < 1.0 - UNIT_TOL]


def critical_points(spectrum: IBSpectrum) -> np.ndarray:
    """c_N for N = 1..D-1: past information at which direction N+1 is recruited.

    c_N = 1/2 sum_{i<=N} log[(l_{N+1} / l_i) (1 - l_i) / (1 - l_{N+1})]; infinite
    when l_{N+1} is 1 (an uninformative direction is never recruited).
    """
    raw = spectrum.lambdas
    if raw.size and (raw[0] < -SPECTRUM_SLACK or raw[-1] > 1.0 + SPECTRUM_SLACK):
        raise DegenerateSpectrumError(f"eigenvalues outside [0, 1]: {raw[0]:.3g} .. {raw[-1]:.3g}")
    lam = spectrum.clipped()
    out = np.full(max(lam.size - 1, 0), np.inf)
    for n in range(1, lam.size):
        nxt = lam[n]
        if nxt >= 1.0 - UNIT_TOL:
            break
        head = lam[:n]
        out[n - 1] = 0.5 * float(np.sum(np.log(nxt / head) + np.log1p(-head) - math.log1p(-nxt)))
    return out


class FrontierCurve:
    """Piecewise analytic optimal frontier I(T;Y) as a function of I(T;X)."""

    def __init__(self, spectrum: IBSpectrum):
        self.spectrum = spectrum
        self.lambdas = _informative(spectrum)
        crit = critical_points(spectrum)
        self.critical_points = crit[: max(self.lambdas.size - 1, 0)]
        # per-segment mean log(1 - l) and mean log l over the n smallest eigenvalues
        n = np.arange(1, self.lambdas.size + 1)
        self._mlog1m = np.cumsum(np.log1p(-self.lambdas)) / n
        self._mlog = np.cumsum(np.log(self.lambdas)) / n

    def segment(self, i_past: float) -> int:
        """Number of eigen-directions in use (inclusive left edges)."""
        return 1 + bisect.bisect_right(list(self.critical_points), i_past)

    def segment_value(self, i_past, n: int):
        i_past = np.asarray(i_past, dtype=np.float64)
        return i_past - 0.5 * n * np.logaddexp(self._mlog1m[n - 1], 2.0 * i_past / n + self._mlog[n - 1])

    def __call__(self, i_past: float) -> float:
        if i_past < 0:
            raise ValueError("past information must be non-negative")
        if self.lambdas.size == 0:
            return 0.0
        return float(self.segment_value(i_past, self.segment(i_past)))

    def values(self, grid) -> np.ndarray:
        return np.array([self(float(v)) for v in grid])

    @property
    def asymptote(self) -> float:
        return -0.5 * float(np.sum(np.log(self.lambdas)))


def frontier_value(spectrum: IBSpectrum, i_past: float) -> float:
    if spectrum.lambdas.size == 0:
        raise ValueError("empty spectrum")
    return FrontierCurve(spectrum)(i_past)


def encoder_plane_point(joint: GaussianJoint, enc: LinearEncoder) -> tuple[float, float]:
    """Exact (I(T;X), I(T;Y)) for T = A X + eps."""
    a, se = enc.a, enc.sigma_eps
    if a.shape[1] != joint.sigma_x.shape[0] or se.shape != (a.shape[0], a.shape[0]):
        raise ValueError("encoder shape incompatible with joint")
    cov_t = a @ joint.sigma_x @ a.T + se
    cov_t_given_y = a @ conditional_covariance(joint) @ a.T + se
    ld_t = _logdet(0.5 * (cov_t + cov_t.T))
    i_past = 0.5 * (ld_t - _logdet(se))
    i_future = 0.5 * (ld_t - _logdet(0.5 * (cov_t_given_y + cov_t_given_y.T)))
    return i_past, i_future


def ib_lagrangian(joint: GaussianJoint, enc: LinearEncoder, beta: float) -> float:
    i_past, i_future = encoder_plane_point(joint, enc)
    return i_past - beta * i_future


def frontier_table(spectrum: IBSpectrum, i_max: float | None = None, n: int = 200) -> np.ndarray:
    """(n, 2) array of (i_past, i_future) samples of the frontier."""
    curve = FrontierCurve(spectrum)
    if i_max is None:
        finite = curve.critical_points[np.isfinite(curve.critical_points)]
        i_max = max(2.0 * curve.asymptote, 1.5 * (finite.max() if finite.size else 0.0), 1.0)
    grid = np.linspace(0.0, i_max, n)
    return np.column_stack([grid, curve.values(grid)])
