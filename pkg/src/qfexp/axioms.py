"""
Property checks for conditional nonlinear expectations.

Each check evaluates an operator on constructed payoffs over its ensemble,
measures the worst violation of the target identity or inequality, and
compares it against max(3 * bootstrap SE, 1e-6 * scale). The checks lean on
two implementation facts to keep honest operators near the floor:

  * both sides of an identity are evaluated on the same ensemble (common
    random numbers), so projection noise largely cancels;
  * where an identity needs state beyond B_{t_i} (indicator events, additive
    F_t terms, stopped payoffs), the regression basis is augmented with that
    state, which makes the identity exact for the least-squares chain rather
    than approximate.

Planted faults (constant bias, state-dependent gain) must come out above
tolerance; that is itself asserted by the test suite.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .bsde import TerminalCondition
from .operators import ExpectationOperator
from .stochastic import PathEnsemble, StoppingTime, permute_future_increments
from .tolerances import ABS_FLOOR, N_BOOTSTRAP

Array = np.ndarray

__all__ = [
    "AxiomReport",
    "bootstrap_se",
    "check_monotonicity",
    "check_constant_preserving",
    "check_time_consistency",
    "check_zero_one_law",
    "check_translation_invariance",
    "check_comparison",
    "check_optional_sampling",
    "check_measurability",
    "run_axiom_battery",
    "write_reports_csv",
    "summarize_reports",
]


@dataclass
class AxiomReport:
    check: str
    operator: str
    passed: bool
    violation: float
    tolerance: float
    se: float
    scale: float
    n_paths: int
    steps: tuple = ()
    notes: str = ""

    def row(self) -> dict:
        return {
            "check": self.check,
            "operator": self.operator,
            "passed": int(self.passed),
            "violation": repr(self.violation),
            "tolerance": repr(self.tolerance),
            "se": repr(self.se),
            "scale": repr(self.scale),
            "n_paths": self.n_paths,
            "steps": " ".join(map(str, self.steps)),
            "notes": self.notes,
        }


def bootstrap_se(stat_fn, n_paths: int, n_boot: int = N_BOOTSTRAP, seed: int = 7) -> float:
    """SE of a path-functional statistic under resampling with replacement."""
    rng = np.random.Generator(np.random.Philox(key=seed))
    stats = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, n_paths, n_paths)
        stats[b] = stat_fn(idx)
    return float(stats.std())


def _report(check, op, violation, se, scale, steps, notes="") -> AxiomReport:
    tolerance = max(3.0 * se, ABS_FLOOR * scale)
    return AxiomReport(
        check=check, operator=op.name, passed=bool(violation <= tolerance),
        violation=float(violation), tolerance=float(tolerance), se=float(se),
        scale=float(scale), n_paths=op.ensemble.n_paths, steps=tuple(steps), notes=notes,
    )


def _max_jump(values: Array) -> float:
    """Largest one-step move of the operator path (discrete regularity diagnostic)."""
    if values.shape[0] < 2:
        return 0.0
    return float(np.max(np.abs(np.diff(values, axis=0))))


def check_monotonicity(op: ExpectationOperator, xi_hi: TerminalCondition,
                       xi_lo: TerminalCondition, steps) -> AxiomReport:
    """xi_hi >= xi_lo pathwise must give E[xi_hi | F_t] >= E[xi_lo | F_t]."""
    diffs = []
    for i in steps:
        diffs.append(op.evaluate(xi_hi, i) - op.evaluate(xi_lo, i))
    D = np.stack(diffs)
    violation = max(0.0, float(-D.min()))
    scale = max(1.0, float(np.abs(D).max()))
    se = bootstrap_se(lambda idx: max(0.0, float(-D[:, idx].min())), op.ensemble.n_paths)
    return _report("monotonicity", op, violation, se, scale, steps)


def check_constant_preserving(op: ExpectationOperator, constants, steps) -> AxiomReport:
    """E[c | F_t] = c for deterministic c."""
    worst = 0.0
    deviations = []
    for c in constants:
        xi = TerminalCondition.constant(c, op.ensemble)
        for i in steps:
            d = op.evaluate(xi, i) - c
            deviations.append(d)
            worst = max(worst, float(np.abs(d).max()))
    D = np.stack(deviations)
    scale = max(1.0, max(abs(float(c)) for c in constants))
    se = bootstrap_se(lambda idx: float(np.abs(D[:, idx]).max()), op.ensemble.n_paths)
    return _report("constant-preserving", op, worst, se, scale, steps)


def check_time_consistency(op: ExpectationOperator, xi: TerminalCondition,
                           s: int, t: int) -> AxiomReport:
    """E_s[E_t[xi]] = E_s[xi]; the inner value is re-fed as terminal data at t."""
    if not (s <= t <= xi.maturity):
        raise ValueError("need s <= t <= maturity")
    inner = op.evaluate(xi, t)
    nested = op.evaluate(TerminalCondition.bounded(inner, bound=None, maturity=t), s)
    direct = op.evaluate(xi, s)
    D = nested - direct
    violation = float(np.abs(D).max())
    scale = max(1.0, float(np.abs(direct).max()))
    se = bootstrap_se(lambda idx: float(np.abs(D[idx]).max()), op.ensemble.n_paths)
    return _report("time-consistency", op, violation, se, scale, (s, t))


def _event_indicator(step: int, component: int = 0, threshold: float = 0.0):
    def func(ensemble: PathEnsemble, i: int) -> Array:
        return (ensemble.values[step, :, component] > threshold).astype(float)

    return func


def check_zero_one_law(op: ExpectationOperator, xi: TerminalCondition, t: int,
                       component: int = 0, threshold: float = 0.0) -> AxiomReport:
    """E[1_A xi | F_t] = 1_A E[xi | F_t] for the threshold event A in F_t.

    Both solves run with the basis augmented by the event indicator (and its
    interactions), which block-diagonalizes the projections across A.
    """
    ind_fn = _event_indicator(t, component, threshold)
    ind = ind_fn(op.ensemble, t)
    op2 = op.with_basis(op.basis.augment(ind_fn, interact=True))
    lhs = op2.evaluate(TerminalCondition.bounded(xi.values * ind, xi.bound, xi.maturity), t)
    rhs = ind * op2.evaluate(TerminalCondition.bounded(xi.values, xi.bound, xi.maturity), t)
    D = lhs - rhs
    violation = float(np.abs(D).max())
    scale = max(1.0, float(np.abs(rhs).max()))
    se = bootstrap_se(lambda idx: float(np.abs(D[idx]).max()), op.ensemble.n_paths)
    return _report("zero-one-law", op, violation, se, scale, (t,),
                   notes=f"event B_t>{threshold}, mass {ind.mean():.3f}")


def check_translation_invariance(op: ExpectationOperator, xi: TerminalCondition,
                                 eta_fn, t: int) -> AxiomReport:
    """E[xi + eta | F_t] = E[xi | F_t] + eta for bounded F_t-measurable eta.

    eta_fn(ensemble) must read only B[0..t]. The eta column is appended to
    the basis so the shift survives every projection in the chain exactly.
    """
    eta = np.asarray(eta_fn(op.ensemble), dtype=float)
    op2 = op.with_basis(op.basis.augment(lambda ens, i: eta_fn(ens), interact=False))
    lhs = op2.evaluate(TerminalCondition.bounded(xi.values + eta, None, xi.maturity), t)
    rhs = op2.evaluate(TerminalCondition.bounded(xi.values, None, xi.maturity), t) + eta
    D = lhs - rhs
    violation = float(np.abs(D).max())
    scale = max(1.0, float(np.abs(rhs).max()))
    se = bootstrap_se(lambda idx: float(np.abs(D[idx]).max()), op.ensemble.n_paths)
    return _report("translation-invariance", op, violation, se, scale, (t,))


def check_comparison(op: ExpectationOperator, f, kappa: float,
                     xi: Array, xi_prime: Array, phi: Array | None,
                     z: Array, min_fraction: float = 0.99) -> AxiomReport:
    """Solutions of the driver-f fixed-point equation are ordered when the data are.

    xi_prime >= xi pathwise and phi >= 0 must give Y' >= Y up to projection
    noise; the check requires ordering at min_fraction of path-steps.
    """
    from .decomposition import FixedPointProblem, solve_fixed_point

    base = FixedPointProblem(xi=np.asarray(xi, float), z=z, f=f, kappa=kappa, operator=op)
    upper = FixedPointProblem(xi=np.asarray(xi_prime, float), z=z, f=f, kappa=kappa,
                              operator=op, phi=phi)
    Y = solve_fixed_point(base).Y
    Yp = solve_fixed_point(upper).Y
    D = Yp - Y
    violation = max(0.0, float(-D.min()))
    scale = max(1.0, float(np.abs(Y).max()))
    se = bootstrap_se(lambda idx: max(0.0, float(-D[:, idx].min())), op.ensemble.n_paths)
    tol = max(3.0 * se, ABS_FLOOR * scale)
    fraction = float((D >= -tol).mean())
    report = _report("comparison", op, violation, se, scale, (),
                     notes=f"ordered fraction {fraction:.4f}")
    report.passed = fraction >= min_fraction
    return report


def check_optional_sampling(op: ExpectationOperator, X: Array, z: Array,
                            tau: StoppingTime, sigma: StoppingTime,
                            mode: str = "eq", rel_tol: float = 0.03) -> AxiomReport:
    """Stopped evaluation of an operator martingale: E[X_tau + z B_tau | F_sigma]
    compared against X_{tau ^ sigma} + z B_{tau ^ sigma}.

    X is an operator-(sub/super)martingale given as paths (N+1, M); mode is
    "eq", "ge" or "le". Evaluation at sigma partitions on {sigma = t_j}. The
    basis is augmented with the hit indicator and the stopped payoff so the
    conditional expectations stay unbiased after tau.
    """
    ens = op.ensemble
    M = ens.n_paths
    ar = np.arange(M)
    z = np.atleast_1d(np.asarray(z, float))
    xi0 = X[tau.indices, ar]

    def hit(ensemble, i):
        return (tau.indices <= i).astype(float)

    def stopped_col(ensemble, i):
        # the solver regresses shift-corrected values, whose stopped plateau is xi0
        return (tau.indices <= i) * xi0

    basis2 = op.basis.augment(hit, interact=True).augment(stopped_col, interact=False)
    op2 = op.with_basis(basis2)
    xi = TerminalCondition.with_affine(
        xi0=xi0, z=z, stop=tau, maturity=ens.grid.steps,
        bound=float(np.abs(xi0).max()) or 1.0,
    )
    lo = int(sigma.indices.min())
    values = op2.evaluate_path(xi, lo=lo)
    lhs = values[sigma.indices, ar]

    both = np.minimum(tau.indices, sigma.indices)
    rhs = X[both, ar] + np.einsum("md,d->m", ens.values[both, ar, :], z)
    D = lhs - rhs
    if mode == "eq":
        violation = float(np.abs(D).max())
    elif mode == "ge":
        violation = max(0.0, float(-D.min()))
    else:
        violation = max(0.0, float(D.max()))
    scale = max(1.0, float(np.abs(rhs).max()))
    se = bootstrap_se(lambda idx: float(np.abs(D[idx]).max()), M)
    tolerance = max(3.0 * se, rel_tol * scale)
    return AxiomReport(
        check=f"optional-sampling-{mode}", operator=op.name,
        passed=bool(violation <= tolerance), violation=float(violation),
        tolerance=float(tolerance), se=float(se), scale=float(scale),
        n_paths=M, steps=(lo,), notes=f"max one-step jump {_max_jump(values[lo:]):.4f}",
    )


def check_measurability(op: ExpectationOperator, xi: TerminalCondition, i: int,
                        shift: int = 1) -> AxiomReport:
    """Output at step i must be untouched by permuting increments from step i on."""
    probe = permute_future_increments(op.ensemble, i, shift)
    v1 = op.evaluate(xi, i)
    v2 = op.evaluate_frozen(xi, i, probe)
    violation = float(np.abs(v1 - v2).max())
    scale = max(1.0, float(np.abs(v1).max()))
    report = _report("measurability", op, violation, 0.0, scale, (i,))
    report.passed = violation == 0.0
    report.tolerance = 0.0
    return report


def run_axiom_battery(op: ExpectationOperator, steps=None, seed_payoffs: int = 0) -> list[AxiomReport]:
    """Monotonicity, constant preservation, time consistency, the indicator
    law, and translation invariance on the standard payoff set."""
    ens = op.ensemble
    N = ens.grid.steps
    steps = steps or (0, N // 4, N // 2, 3 * N // 4)
    b_T = ens.values[N, :, 0]
    reports = []

    xi_hi = TerminalCondition.bounded(np.minimum(np.abs(b_T), 2.0), 2.0, N)
    xi_lo = TerminalCondition.bounded(np.zeros(ens.n_paths), 2.0, N)
    reports.append(check_monotonicity(op, xi_hi, xi_lo, steps))
    eta = TerminalCondition.bounded(np.tanh(b_T), 1.0, N)
    eta_plus = TerminalCondition.bounded(np.tanh(b_T) + 1.0, 2.0, N)
    reports.append(check_monotonicity(op, eta_plus, eta, steps))

    reports.append(check_constant_preserving(op, (-1.0, 0.0, 3.0), steps))

    xi = TerminalCondition.bounded(np.cos(b_T), 1.0, N)
    reports.append(check_time_consistency(op, xi, N // 4, N // 2))
    reports.append(check_time_consistency(op, xi, 0, 3 * N // 4))

    xi_t = TerminalCondition.bounded(np.tanh(b_T), 1.0, N)
    reports.append(check_zero_one_law(op, xi_t, N // 2))

    t = N // 2
    reports.append(check_translation_invariance(
        op, xi, lambda ens_, i=t: np.tanh(ens_.values[t, :, 0]), t))
    return reports


def write_reports_csv(reports, path) -> None:
    rows = [r.row() for r in reports]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def summarize_reports(reports) -> str:
    lines = []
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        lines.append(
            f"[{status}] {r.check:<24} op={r.operator:<20} violation={r.violation:.3e} "
            f"tol={r.tolerance:.3e} (3SE={3 * r.se:.3e})"
        )
    return "\n".join(lines)
