"""Compensator of a nonlinear submartingale by penalization: the canonical
test process and a drifted operator martingale.

Run:  python3 demos/05_penalization_decomposition.py
"""

import numpy as np

import qfexp as q
from qfexp.representation import canonical_process

grid = q.make_grid(1.0, 128)
ens = q.simulate_brownian(grid, dim=1, n_paths=2048, seed=20240604)
basis = q.piecewise_basis(25)
op = q.GExpectation(generator=q.entropic_generator(1.0), ensemble=ens, basis=basis)

z = np.array([1.0])
proc = canonical_process(z, ell=1.0, ensemble=ens)
print(f"canonical process drift rate {proc.drift_rate}, compensator slope should be "
      f"{0.5 + proc.drift_rate} (driver at z plus the drift rate)")

result = q.doob_meyer_decompose(proc.drift, z, op, schedule=(1, 2, 4, 8, 16, 32, 64))
print(f"{'n':>4} {'sup|y^n - U|':>14} {'mean A_T':>10} {'mart resid':>12}")
for row in result.run_table():
    print(f"{row['n']:>4} {float(row['sup_gap']):>14.5f} {float(row['mean_A_T']):>10.5f} "
          f"{float(row['mart_residual']):>12.2e}")
target = (0.5 + proc.drift_rate) * grid.points
print("sup |A - target|:", np.abs(result.A.mean(axis=1) - target).max().round(5))
print("ordering of levels held at", f"{result.ordering_fraction:.2%}", "of path-steps")

# a drifted operator martingale decomposes into itself plus eps * t
xi = q.TerminalCondition.bounded(np.tanh(ens.values[-1, :, 0]), 1.0, grid.steps)
U = op.evaluate_path(xi) + 0.25 * grid.points[:, None]
res2 = q.doob_meyer_decompose(U, np.array([0.0]), op, schedule=(16, 32))
print("drifted martingale: sup |A - 0.25 t| =",
      np.abs(res2.A - 0.25 * grid.points[:, None]).max().round(5))
