import math

import numpy as np
import pytest

from predinfo import bho

MC_SEED = 20261016  # fixed before any Monte-Carlo check was run


def test_transition_at_paper_parameters():
    p = bho.BHOParams()
    a, q = bho.transition(p)
    assert a[0, 0] == 1.0 and a[0, 1] == pytest.approx(0.01667)
    assert a[1, 0] == pytest.approx(-(3.0 * math.pi) ** 2 * 0.01667, rel=1e-12)
    assert a[1, 0] == pytest.approx(-1.4804, abs=5e-4)
    assert a[1, 1] == pytest.approx(0.6666, abs=1e-12)
    assert q[1, 1] == pytest.approx(16.67) and q[0, 0] == q[0, 1] == q[1, 0] == 0.0


def test_degenerate_transitions():
    a, q = bho.transition(bho.BHOParams(dt=0.0))
    np.testing.assert_array_equal(a, np.eye(2))
    assert not np.any(q)
    a, _ = bho.transition(bho.BHOParams(omega=0.0, gamma=0.0, dt=0.1))
    np.testing.assert_array_equal(a, [[1.0, 0.1], [0.0, 1.0]])


def test_parameter_validation():
    with pytest.raises(ValueError):
        bho.BHOParams(gamma=-1.0)
    with pytest.raises(ValueError):
        bho.BHOParams(gamma=100.0, dt=0.02)


def test_unstable_dynamics_have_no_stationary_covariance():
    with pytest.raises(bho.UnstableDynamicsError):
        bho.stationary_covariance(bho.BHOParams(omega=0.0, gamma=0.0, dt=0.1))
    with pytest.raises(bho.UnstableDynamicsError):
        bho.stationary_covariance(bho.BHOParams(omega=60.0, gamma=1.0, dt=0.05))


def test_stationary_covariance_solves_lyapunov():
    p = bho.BHOParams()
    s = bho.stationary_covariance(p)
    assert bho.lyapunov_residual(p, s) < 1e-10
    np.testing.assert_array_equal(s, s.T)
    assert np.all(np.linalg.eigvalsh(s) > 0)
    assert not np.any(bho.stationary_covariance(bho.BHOParams(D=0.0)))


def test_single_deterministic_step():
    p = bho.BHOParams(D=0.0)
    a, _ = bho.transition(p)
    x1, v1 = a @ np.array([1.0, 0.0])
    assert x1 == 1.0 and v1 == pytest.approx(-p.omega**2 * p.dt)


def test_zero_forcing_zero_init_stays_at_rest():
    batch = bho.simulate(bho.BHOParams(D=0.0), 10, 20, seed=1, init="zero")
    assert not np.any(batch.data)


def test_simulation_is_reproducible_and_worker_independent():
    p = bho.BHOParams()
    a = bho.simulate(p, 9000, 30, seed=5, workers=1)
    b = bho.simulate(p, 9000, 30, seed=5, workers=3)
    np.testing.assert_array_equal(a.data, b.data)
    assert a.positions.shape == (9000, 30, 1)
    c = bho.simulate(p, 9000, 30, seed=6)
    assert not np.array_equal(a.data, c.data)


def test_simulate_rejects_bad_arguments():
    with pytest.raises(ValueError):
        bho.simulate(bho.BHOParams(), 0, 10, seed=0)
    with pytest.raises(ValueError):
        bho.simulate(bho.BHOParams(), 5, 10, seed=0, init="random")


def test_long_run_variance_matches_stationary_covariance():
    # 200k trajectories started at rest; after 80 steps the transient is ~1e-7 of the variance
    p = bho.BHOParams()
    s = bho.stationary_covariance(p)
    final = bho.simulate(p, 200_000, 80, seed=MC_SEED, init="zero").data[:, -1]
    n = len(final)
    for i, j in [(0, 0), (0, 1), (1, 1)]:
        est = np.mean(final[:, i] * final[:, j])
        se = math.sqrt((s[i, i] * s[j, j] + s[i, j] ** 2) / n)
        assert abs(est - s[i, j]) < 3 * se, (i, j, est, s[i, j], se)


def test_window_covariance_structure():
    p = bho.BHOParams()
    joint = bho.window_covariances(p, bho.WindowSpec())
    s = bho.stationary_covariance(p)
    np.testing.assert_allclose(np.diag(joint.sigma_x), s[0, 0], rtol=1e-12)
    np.testing.assert_allclose(np.diag(joint.sigma_y), s[0, 0], rtol=1e-12)
    full = joint.full
    np.testing.assert_array_equal(full, full.T)
    assert np.all(np.linalg.eigvalsh(full) > 0)
    c = bho.position_autocovariance(p, 35)
    assert joint.sigma_xy[17, 0] == pytest.approx(c[1])
    assert joint.sigma_xy[0, 17] == pytest.approx(c[35])


def test_window_spec_slicing():
    spec = bho.WindowSpec()
    seqs = np.arange(100, dtype=float)[None, :, None]
    assert spec.past(seqs)[0, :, 0].tolist() == list(range(64, 82))
    assert spec.future(seqs)[0, :, 0].tolist() == list(range(82, 100))
    c = bho.WindowSpec.centered(18, 18)
    assert (c.total_len, c.split_index) == (36, 18)
    with pytest.raises(ValueError):
        bho.WindowSpec(18, 18, 30, 18)


def test_source_produces_stationary_positions():
    src = bho.BHOSource(seq_len=40)
    x = src.sample(50_000, np.random.default_rng(MC_SEED))
    var = bho.stationary_covariance(src.params)[0, 0]
    assert x.shape == (50_000, 40, 1)
    for t in (0, 39):
        se = var * math.sqrt(2.0 / len(x))
        assert abs(np.mean(x[:, t, 0] ** 2) - var) < 3 * se
