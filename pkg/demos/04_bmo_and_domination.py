"""BMO estimates, the reverse Holder threshold, and the stability
(domination) checks, ending with the self-domination failure demo.

Run:  python3 demos/04_bmo_and_domination.py
"""

import numpy as np

import qfexp as q
from qfexp.stochastic import deterministic_stopping_time, first_hitting_time

grid = q.make_grid(1.0, 32)
ens = q.simulate_brownian(grid, dim=1, n_paths=2**14, seed=20240603)
basis = q.piecewise_basis(30)

# BMO estimate of a solved integrand and the a priori bound
xi = q.TerminalCondition.bounded(np.cos(ens.values[-1, :, 0]), 1.0, grid.steps)
sol = q.solve_bsde(xi, q.entropic_generator(1.0), ens, basis)
est = q.bmo_norm(ens, sol.Z, hitting_levels=(0.5, 1.0, 1.5, 2.0))
print("squared BMO estimate:", round(est.value, 4), "over family", est.family)
print("a priori bound check:", q.bmo_bound_from_solution(sol, k=1.0, ensemble=ens))
for n in (1, 2, 3):
    rep = q.check_energy_inequality(ens, sol.Z, n, est)
    print(f"energy inequality n={n}: {rep['lhs']:.4g} <= {rep['rhs']:.4g}  passed={rep['passed']}")

# the reverse Holder threshold function and its inversion
print("phi_3(2) =", q.phi_alpha(3, 2.0))
p, qq, resid = q.solve_p_for_bmo(3.0, q.phi_alpha(3, 2.0))
print(f"inverting at that level: q = {qq:.6f}, p = {p:.6f}, residual {resid:.1e}")
kernel = q.stochastic_exponential(ens, np.full((grid.steps, ens.n_paths, 1), 0.1))
print("reverse Holder:", q.check_reverse_holder(ens, kernel, p=2.0, alpha=3.0))

# stability checks for the quadratic operator
op = q.GExpectation(generator=q.entropic_generator(1.0), ensemble=ens, basis=basis)
bT = ens.values[-1, :, 0]
tau = deterministic_stopping_time(ens, grid.steps)
consts = q.DominationConstants.from_bounds(K=1.0, R=1.0, ell=1.0)
print("L^p   :", q.check_lp_domination(op, np.tanh(bT), np.zeros(ens.n_paths), tau,
                                       first_hitting_time(ens, 0, 1.0), np.array([1.0]), consts))
print("L^inf :", q.check_linf_domination(op, np.tanh(bT), np.zeros(ens.n_paths), tau, np.array([1.0])))
one = q.DominationConstants.from_bounds(K=1.6, R=1.0, ell=1.0, J=5.0, alpha=0.5)
print("1-side:", q.check_one_sided_domination(op, np.tanh(bT), 0.5 * np.tanh(bT),
                                              np.array([1.0]), tau, one))

# and the reason the naive difference bound cannot work for quadratic drivers
demo = q.domination_failure_demo(1.0, 1.0, ens)
print(f"self-domination gap = {demo['gap']:.4f}  ({demo['gap'] / demo['se']:.0f} standard errors)")
