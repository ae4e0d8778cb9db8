"""Fixed-step Stratonovich integration on a shared time grid.

The latent state is advanced by the Euler--Heun scheme for diagonal noise:
plain Euler in the drift, a trapezoidal average of the diffusion evaluated
at the current state and at an Euler predictor.  That averaging is what
makes the discretization consistent with the Stratonovich (rather than Ito)
reading of the equation, which shows up directly in the moments of
geometric Brownian motion and is pinned by tests.

The grid is the union of a uniform step lattice and the requested output
times, so outputs land on grid points exactly instead of being
interpolated.  Brownian increments are pre-drawn per path from a seeded
generator and are bit-identical when regenerated from the same seed; the
solver never draws randomness itself.  Drift and diffusion callbacks may
return either plain arrays or tape variables — the solver is agnostic,
which is how training backpropagates through the unrolled scheme.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class SdeError(RuntimeError):
    """Bad grid/path geometry or a diverging integration."""


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing times with positions of the requested outputs."""

    times: np.ndarray
    out_index: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1


def time_grid(t0: float, out_times, h: float) -> TimeGrid:
    """Union of the uniform lattice ``t0 + k*h`` and the output times.

    Parameters
    ----------
    t0 : float
        Integration start.
    out_times : array-like
        Strictly increasing times in ``(t0 - eps, t_end]`` at which the
        state must be reported; the last one defines the horizon.
    h : float
        Nominal step; actual steps never exceed it.
    """
    out = np.asarray(out_times, dtype=np.float64)
    if out.ndim != 1 or out.size == 0:
        raise SdeError("output times must be a non-empty 1-D array")
    if not np.all(np.isfinite(out)) or not np.isfinite(t0):
        raise SdeError("non-finite times")
    if np.any(np.diff(out) <= 0):
        raise SdeError("output times must be strictly increasing")
    if out[0] < t0 - 1e-9:
        raise SdeError(f"output time {out[0]} precedes start {t0}")
    if not (np.isfinite(h) and h > 0):
        raise SdeError(f"step size must be positive, got {h}")
    t1 = max(float(out[-1]), t0)
    if t1 <= t0 + 1e-12:
        raise SdeError("horizon must extend past the start time")
    n = int(np.ceil((t1 - t0) / h - 1e-9))
    lattice = t0 + h * np.arange(n + 1)
    times = np.concatenate([lattice, out, [t1]])
    times.sort(kind="stable")
    times = times[np.concatenate([[True], np.diff(times) > 1e-9])]
    out_index = np.array([int(np.argmin(np.abs(times - o))) for o in out])
    if np.any(np.abs(times[out_index] - out) > 1e-9):
        raise SdeError("internal grid failed to cover an output time")
    return TimeGrid(times=times, out_index=out_index)


@dataclass(frozen=True)
class BrownianPath:
    """Pre-drawn increments: ``increments[k]`` covers ``times[k] -> times[k+1]``."""

    seed: int
    times: np.ndarray
    increments: np.ndarray


def brownian_path(seed: int, grid: TimeGrid, shape: tuple) -> BrownianPath:
    """Draw N(0, dt) increments for every step of the grid.

    ``shape`` is the state shape; increments come out as
    ``(n_steps, *shape)``.  The draw is a pure function of ``(seed, grid,
    shape)`` — regenerating with the same arguments is bit-identical, which
    is what makes whole-pipeline runs reproducible.
    """
    dts = np.diff(grid.times)
    if np.any(dts <= 0):
        raise SdeError("grid times must be strictly increasing")
    rng = np.random.Generator(np.random.PCG64(seed))
    z = rng.standard_normal((len(dts),) + tuple(shape))
    sd = np.sqrt(dts).reshape((-1,) + (1,) * len(shape))
    return BrownianPath(seed=int(seed), times=grid.times, increments=z * sd)


def euler_heun_step(z, s, f, g, dt: float, dw):
    """One predictor/corrector step.

    predictor:  zbar = z + f(z|s) dt + g(z|s) . dw
    corrector:  z'   = z + f(z|s) dt + (g(z|s) + g(zbar|s))/2 . dw

    The drift enters once, un-averaged; only the diffusion is averaged.
    ``dw`` is a constant array of the same shape as the state.
    """
    fz = f(z, s)
    gz = g(z, s)
    drift = ad.scale(fz, dt)
    zbar = ad.add(z, ad.add(drift, ad.scale(gz, dw)))
    gbar = ad.scale(ad.add(gz, g(zbar, s)), 0.5)
    return ad.add(z, ad.add(drift, ad.scale(gbar, dw)))


def solve(f, g, z0, s, grid: TimeGrid, path: BrownianPath, guard: float = 1e6):
    """Integrate over the whole grid; return states at the output times.

    Parameters
    ----------
    f, g : callables
        ``f(z, s)`` and ``g(z, s)`` returning drift/diffusion with the
        state's shape.  May consume and return tape variables.
    z0 : array or Var
        Initial state; its shape must match ``path.increments[k]``.
    s : object
        Conditioning payload passed through to ``f``/``g`` untouched
        (typically a one-hot treatment row block).
    grid : TimeGrid
    path : BrownianPath
        Must cover exactly this grid's steps.
    guard : float
        Divergence bound; integration aborts when max |z| exceeds it.

    Returns
    -------
    list
        States (same type as ``z0``) at ``grid.out_index`` positions,
        in output-time order.
    """
    inc = path.increments
    zshape = z0.shape if isinstance(z0, ad.Var) else np.shape(z0)
    if inc.shape != (grid.n_steps,) + tuple(zshape):
        raise SdeError(
            f"path increments {inc.shape} do not cover grid "
            f"({grid.n_steps} steps of state shape {tuple(zshape)})")
    wanted = set(int(i) for i in grid.out_index)
    z = z0
    out = {0: z} if 0 in wanted else {}
    for k in range(grid.n_steps):
        dt = float(grid.times[k + 1] - grid.times[k])
        z = euler_heun_step(z, s, f, g, dt, inc[k])
        zmax = float(np.max(np.abs(ad._val(z)))) if np.size(ad._val(z)) else 0.0
        if not np.isfinite(zmax) or zmax > guard:
            raise SdeError(
                f"state diverged at step {k + 1} (t={grid.times[k + 1]:g}): "
                f"max |z| = {zmax:g} exceeds guard {guard:g}")
        if k + 1 in wanted:
            out[k + 1] = z
    return [out[int(i)] for i in grid.out_index]
