"""Solver oracles: hand-worked steps, matrix-exponential reference,
Stratonovich-vs-Ito discrimination on geometric Brownian motion."""

import numpy as np
import pytest
from scipy.linalg import expm  # test-only reference

from trajcast import autodiff as ad
from trajcast.sde import (BrownianPath, SdeError, brownian_path,
                          euler_heun_step, solve, time_grid)


def _linear(a):
    return lambda z, s: ad.scale(z, a)


def _zero(z, s):
    return ad.scale(z, 0.0)


# --- hand-worked step values -----------------------------------------------

def test_step_drift_only_hand_value():
    # f = a z with a = 1, z = 1, dt = 0.1, no noise -> 1.1 exactly
    z = euler_heun_step(np.array(1.0), None, _linear(1.0), _zero, 0.1, np.array(0.0))
    assert float(z) == pytest.approx(1.1, abs=1e-15)


def test_step_diffusion_averaging_hand_value():
    # f = 0, g = b z with b = 0.5, z = 1, dw = 0.2:
    # predictor 1.1, corrector 1 + 0.5*(0.5 + 0.55)*0.2 = 1.105
    z = euler_heun_step(np.array(1.0), None, _zero, _linear(0.5), 0.1, np.array(0.2))
    assert float(z) == pytest.approx(1.105, abs=1e-15)


def test_step_shape_agnostic():
    z0 = np.array([[1.0, 2.0], [3.0, 4.0]])
    dw = np.full((2, 2), 0.2)
    z = euler_heun_step(z0, None, _zero, _linear(0.5), 0.1, dw)
    assert np.allclose(z, z0 * 1.105)


# --- grid construction -----------------------------------------------------

def test_grid_outputs_land_exactly():
    g = time_grid(0.0, [3.7, 12.0, 25.3], h=1.0)
    assert np.all(np.diff(g.times) > 0)
    assert np.max(np.diff(g.times)) <= 1.0 + 1e-12
    assert np.allclose(g.times[g.out_index], [3.7, 12.0, 25.3], atol=1e-12)


def test_grid_integer_visits_stay_on_weekly_lattice():
    rng = np.random.default_rng(3)
    for _ in range(20):
        visits = np.unique(rng.integers(1, 97, size=rng.integers(1, 9)))
        g = time_grid(0.0, visits.astype(float), h=1.0)
        # union of the weekly lattice and integer visits is the lattice itself
        assert len(g.times) == visits.max() + 1
        assert np.allclose(np.diff(g.times), 1.0)


def test_grid_start_time_output():
    g = time_grid(0.0, [0.0, 2.0], h=1.0)
    assert g.out_index[0] == 0


def test_grid_validation_errors():
    with pytest.raises(SdeError, match="strictly increasing"):
        time_grid(0.0, [2.0, 1.0], h=1.0)
    with pytest.raises(SdeError, match="precedes"):
        time_grid(5.0, [1.0], h=1.0)
    with pytest.raises(SdeError, match="positive"):
        time_grid(0.0, [1.0], h=0.0)
    with pytest.raises(SdeError, match="non-empty"):
        time_grid(0.0, [], h=1.0)


# --- Brownian path ----------------------------------------------------------

def test_brownian_variance_and_mean():
    g = time_grid(0.0, [5000.0], h=0.25)
    p = brownian_path(42, g, shape=(1,))
    inc = p.increments.ravel()
    assert len(inc) == 20000
    assert abs(inc.mean()) < 4 * 0.5 / np.sqrt(len(inc))
    assert 0.24 < inc.var() < 0.26  # Var = dt = 0.25


def test_brownian_bit_identical_regeneration():
    g = time_grid(0.0, [10.0], h=0.5)
    a = brownian_path(7, g, shape=(3, 2))
    b = brownian_path(7, g, shape=(3, 2))
    assert np.array_equal(a.increments, b.increments)
    c = brownian_path(8, g, shape=(3, 2))
    assert not np.array_equal(a.increments, c.increments)


def test_path_grid_mismatch_rejected():
    g = time_grid(0.0, [2.0], h=1.0)
    p = brownian_path(0, g, shape=(2,))
    g_long = time_grid(0.0, [3.0], h=1.0)
    with pytest.raises(SdeError, match="do not cover"):
        solve(_zero, _zero, np.zeros(2), None, g_long, p)


# --- deterministic accuracy ------------------------------------------------

def _drift_matrix(rho=0.25, n=4, seed=5):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal((n, n))
    return rho * r / np.max(np.abs(np.linalg.eigvals(r)))


def _silent_path(grid, shape):
    return BrownianPath(seed=0, times=grid.times,
                        increments=np.zeros((grid.n_steps,) + shape))


def test_zero_diffusion_equals_explicit_euler_exactly():
    a = _drift_matrix()
    f = lambda z, s: ad.matmul(z, a.T)
    grid = time_grid(0.0, [1.0], h=0.1)
    z0 = np.array([[1.0, -0.5, 0.25, 2.0]])
    out = solve(f, _zero, z0, None, grid, _silent_path(grid, z0.shape))[0]
    z = z0.copy()
    for k in range(grid.n_steps):
        z = z + (z @ a.T) * float(grid.times[k + 1] - grid.times[k])
    assert np.array_equal(out, z)


def test_zero_diffusion_matches_matrix_exponential():
    a = _drift_matrix()
    f = lambda z, s: ad.matmul(z, a.T)
    z0 = np.array([[1.0, -0.5, 0.25, 2.0]])
    marks = [0.5, 1.0, 1.5, 2.0]
    grid = time_grid(0.0, marks, h=0.01)
    outs = solve(f, _zero, z0, None, grid, _silent_path(grid, z0.shape))
    for t, zh in zip(marks, outs):
        exact = z0 @ expm(a * t).T
        rel = np.linalg.norm(zh - exact) / np.linalg.norm(exact)
        assert rel < 1e-3, f"t={t}: rel err {rel:.2e}"


def test_zero_diffusion_first_order_convergence():
    # drift is plain Euler, so halving h should halve the error
    a = _drift_matrix()
    f = lambda z, s: ad.matmul(z, a.T)
    z0 = np.array([[1.0, -0.5, 0.25, 2.0]])
    exact = z0 @ expm(a * 2.0).T

    def err(h):
        grid = time_grid(0.0, [2.0], h=h)
        out = solve(f, _zero, z0, None, grid, _silent_path(grid, z0.shape))[0]
        return np.linalg.norm(out - exact)

    ratio = err(0.02) / err(0.01)
    assert 1.8 < ratio < 2.2


# --- Stratonovich discrimination -------------------------------------------

def test_gbm_mean_is_stratonovich_not_ito():
    # dZ = a Z dt + b Z o dW:  E[Z_1] = e^{a + b^2/2}, Ito would give e^a
    n, a, b = 4000, 0.05, 0.2
    grid = time_grid(0.0, [1.0], h=0.05)
    path = brownian_path(99, grid, shape=(n, 1))
    z = solve(_linear(a), _linear(b), np.ones((n, 1)), None, grid, path)[0]
    mean, se = z.mean(), z.std(ddof=1) / np.sqrt(n)
    strat, ito = np.exp(a + b * b / 2.0), np.exp(a)
    assert abs(mean - strat) < 4 * se
    assert abs(mean - ito) > 3 * se


# --- robustness and tape mode ----------------------------------------------

def test_divergence_guard_reports_step():
    grid = time_grid(0.0, [10.0], h=1.0)
    with pytest.raises(SdeError, match=r"diverged at step \d+"):
        solve(_linear(5.0), _zero, np.array([[100.0]]), None, grid,
              _silent_path(grid, (1, 1)))


def test_gradient_through_unrolled_solver():
    # 3-step unroll, learnable drift and diffusion scales
    grid = time_grid(0.0, [0.3], h=0.1)
    path = brownian_path(21, grid, shape=(2, 1))

    def build(tape, ps):
        f = lambda z, s: ad.matmul(z, ps[0])
        g = lambda z, s: ad.matmul(z, ps[1])
        z0 = tape.leaf(np.array([[1.0], [0.5]]))
        out = solve(f, g, z0, None, grid, path)[0]
        return ad.reduce_mean(ad.square(out))

    err = ad.grad_check(build, [np.array([[0.8]]), np.array([[0.3]])], eps=1e-5)
    assert err < 1e-4


def test_solver_reuses_increments_bit_identically():
    grid = time_grid(0.0, [1.0], h=0.1)
    path = brownian_path(5, grid, shape=(3, 2))
    z0 = np.full((3, 2), 0.7)
    a = solve(_linear(0.1), _linear(0.4), z0, None, grid, path)[0]
    b = solve(_linear(0.1), _linear(0.4), z0, None, grid, path)[0]
    assert np.array_equal(a, b)
