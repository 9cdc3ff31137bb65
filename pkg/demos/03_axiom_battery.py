"""Run the expectation-axiom battery on honest operators and on planted
faults, and show the measurability and optional-sampling probes.

Run:  python3 demos/03_axiom_battery.py
"""

import numpy as np

import qfexp as q
from qfexp.axioms import (
    check_constant_preserving, check_measurability, check_optional_sampling,
    run_axiom_battery, summarize_reports,
)
from qfexp.stochastic import deterministic_stopping_time, first_hitting_time

grid = q.make_grid(1.0, 32)
ens = q.simulate_brownian(grid, dim=1, n_paths=2**14, seed=20240602)
basis = q.polynomial_basis(3)

linear = q.LinearExpectation(ens, basis)
entropic = q.GExpectation(generator=q.entropic_generator(1.0), ensemble=ens,
                          basis=basis, name="entropic")

for op in (linear, entropic):
    print(f"--- {op.name} ---")
    print(summarize_reports(run_axiom_battery(op)))

print("--- planted +0.1 bias ---")
fault = q.ConstantBiasOperator(entropic, 0.1)
print(summarize_reports([check_constant_preserving(fault, (-1.0, 0.0, 3.0), (0, 8, 16))]))

# outputs at step i only read the path up to i: permuting the future moves nothing
xi = q.TerminalCondition.bounded(np.cos(ens.values[-1, :, 0]), 1.0, grid.steps)
print(summarize_reports([check_measurability(entropic, xi, 16)]))

# stopped evaluation of an operator martingale
z = np.array([1.0])
tc = q.TerminalCondition.with_affine(np.tanh(ens.values[-1, :, 0]), z, grid.steps,
                                     grid.steps, bound=1.0)
X = entropic.evaluate_path(tc) - ens.values @ z
tau = first_hitting_time(ens, 0, 1.0)
sigma = deterministic_stopping_time(ens, grid.steps // 2)
print(summarize_reports([check_optional_sampling(entropic, X, z, tau, sigma, mode="eq")]))
