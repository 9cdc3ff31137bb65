"""Simulate a Brownian ensemble, inspect its statistics, and play with
stopping times and stochastic integrals.

Run:  python3 demos/01_brownian_ensembles.py
"""

import numpy as np

import qfexp as q

grid = q.make_grid(horizon=1.0, steps=50)
ens = q.simulate_brownian(grid, dim=1, n_paths=2**14, seed=7)

print("grid:", grid.steps, "steps of", grid.dt, "up to T =", grid.horizon)
print("terminal mean / variance:", ens.values[-1, :, 0].mean().round(4),
      ens.values[-1, :, 0].var().round(4), "(variance should be ~T)")

# the generator is counter-based: path 12 is the same in a bigger ensemble
bigger = q.simulate_brownian(grid, dim=1, n_paths=2**15, seed=7)
print("path 12 identical when M doubles:",
      np.array_equal(ens.values[:, 12], bigger.values[:, 12]))

# stopping times are grid-valued and adapted
tau = q.first_hitting_time(ens, component=0, level=1.0)
print("hit |B| >= 1 before T on", f"{(tau.indices < grid.steps).mean():.1%}", "of paths")
print("mean hit time:", tau.times.mean().round(3))

# the forward integral of an adapted integrand is a centred martingale
Z = np.tanh(ens.values[:-1])
integral = q.stochastic_integral(ens, Z)
print("integral mean (should be ~0):", integral.mean().round(5))
lhs = np.mean(integral**2)
rhs = np.mean(np.sum(Z[:, :, 0] ** 2, axis=0) * grid.dt)
print(f"second moment vs integrated square (isometry): {lhs:.4f} vs {rhs:.4f}")
