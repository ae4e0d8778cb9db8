"""Solver sanity on problems with known answers.

Three quick checks you can eyeball: Brownian increments have the right
variance, the zero-diffusion solver reduces to a first-order ODE method
(error halves with the step), and the Stratonovich convention shows up in
the geometric-Brownian-motion mean as e^{(a + b^2/2) t}, not the Ito
e^{a t}.
"""
import numpy as np

from trajcast import brownian_path, solve, time_grid
from trajcast.sde import BrownianPath

# --- Brownian increments -------------------------------------------------
grid = time_grid(0.0, [0.25 * 20000], h=0.25)
path = brownian_path(42, grid, ())
print(f"increment variance {np.var(path.increments, ddof=1):.4f} "
      f"(theory 0.25)")
again = brownian_path(42, grid, ())
print(f"same seed redraw identical: "
      f"{np.array_equal(path.increments, again.increments)}")

# --- deterministic reduction ---------------------------------------------
# dz = -0.3 z dt, z(0) = 2  ->  z(t) = 2 e^{-0.3 t}
f = lambda z, s: -0.3 * z
g = lambda z, s: np.zeros_like(z)
z0 = np.array([2.0])
for h in (0.2, 0.1, 0.05):
    grid = time_grid(0.0, [2.0], h=h)
    silent = BrownianPath(seed=0, times=grid.times,
                          increments=np.zeros((grid.n_steps, 1)))
    (zT,) = solve(f, g, z0, None, grid, silent)
    err = abs(zT[0] - 2 * np.exp(-0.6))
    print(f"h={h:4}  z(2)={zT[0]:.6f}  abs err {err:.2e}")
print("(first-order method: halving h halves the error)")

# --- Stratonovich vs Ito -------------------------------------------------
a, b, n = 0.05, 0.2, 5000
grid = time_grid(0.0, [1.0], h=1 / 64)
path = brownian_path(7, grid, (n,))
(z1,) = solve(lambda z, s: a * z, lambda z, s: b * z, np.ones(n), None,
              grid, path)
se = z1.std(ddof=1) / np.sqrt(n)
print(f"\nGBM mean at t=1: {z1.mean():.4f} +- {se:.4f}")
print(f"  Stratonovich e^(a+b^2/2) = {np.exp(a + b * b / 2):.4f}   <- ours")
print(f"  Ito          e^a         = {np.exp(a):.4f}")
