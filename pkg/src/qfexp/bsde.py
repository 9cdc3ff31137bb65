"""
Backward solver for quadratic drivers over a path ensemble.

The scheme is the explicit regression one: with uniform step dt and terminal
data xi at grid index j,

    Y_j = xi
    Z_i = clip( Proj_i[ (Y_{i+1} - Proj_i[Y_{i+1}]) dB_i / dt ] )
    Y_i = Proj_i[Y_{i+1}] + g(t_i, Z_i) dt

where Proj_i is the cross-sectional least-squares projection of the package's
regression module. The martingale-difference form of the Z target estimates
the same conditional expectation as Y_{i+1} dB_i / dt but with far lower
variance; in particular it vanishes identically for constant continuation
values, which is what makes constant terminal data propagate bit-exactly.

Terminal data of the form xi_0 + z (B_stop - B_start) is handled by the
shifted system: solve for tilde-Y with driver g(s, zeta + z 1_window(s)) and
bounded terminal xi_0, then put back Y = tilde-Y + z (B - B_start) summed over
the elapsed window. This keeps the unbounded linear part out of the
regression targets and out of the clipping.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .generators import Generator, check_h2, default_z_grid
from .regression import RegressionBasis, condexp_regress
from .stochastic import PathEnsemble, StoppingTime, first_hitting_time, indicator_before

Array = np.ndarray

__all__ = [
    "AffinePart",
    "TerminalCondition",
    "BsdeSolution",
    "DivergenceError",
    "BasisInadequacyError",
    "solve_bsde",
    "solve_shifted",
    "conditional_g_expectation",
    "cole_hopf_oracle",
    "deterministic_gexp_affine",
    "default_z_cap",
]


class DivergenceError(RuntimeError):
    """Backward iterates escaped the 10 K safety corridor: unstable configuration."""


class BasisInadequacyError(RuntimeError):
    """A projection left the admissible range (e.g. non-positive values in a log chain)."""


@dataclass(frozen=True)
class AffinePart:
    """Linear payoff component z . (B_stop - B_start) via its increment window."""

    z: Array  # (d,)
    stop: StoppingTime | int
    start: int = 0

    def indicator(self, ensemble: PathEnsemble) -> Array:
        """Window indicator on increments, shape (N, M)."""
        return indicator_before(ensemble, self.stop, self.start)

    def indicator_on(self, ensemble: PathEnsemble) -> Array:
        """Indicator re-derivable on another ensemble (measurability probes)."""
        stop = self.stop
        if isinstance(stop, StoppingTime) and stop.kind == "first-hitting":
            spec = getattr(stop, "spec", None)
            if spec is not None:
                stop = first_hitting_time(ensemble, **spec)
        return indicator_before(ensemble, stop, self.start)


@dataclass(frozen=True)
class TerminalCondition:
    """Terminal data at a grid index: bounded functional, optionally plus an affine part.

    `values` holds the bounded component xi_0 per path, already clipped to
    [-bound, bound] when a bound is declared. The affine component, if any,
    is stored structurally so solvers can apply the shift device.
    """

    values: Array  # (M,)
    maturity: int
    bound: float | None = None
    affine: AffinePart | None = None

    @classmethod
    def bounded(cls, values: Array, bound: float | None, maturity: int) -> "TerminalCondition":
        values = np.asarray(values, dtype=float)
        if bound is not None:
            values = np.clip(values, -bound, bound)
        return cls(values=values, maturity=maturity, bound=bound)

    @classmethod
    def constant(cls, c: float, ensemble: PathEnsemble, maturity: int | None = None) -> "TerminalCondition":
        maturity = ensemble.grid.steps if maturity is None else maturity
        return cls(values=np.full(ensemble.n_paths, float(c)), maturity=maturity, bound=abs(c) or 1.0)

    @classmethod
    def with_affine(
        cls,
        xi0: Array,
        z: Array,
        stop: StoppingTime | int,
        maturity: int,
        bound: float | None = None,
        start: int = 0,
    ) -> "TerminalCondition":
        xi0 = np.asarray(xi0, dtype=float)
        if bound is not None:
            xi0 = np.clip(xi0, -bound, bound)
        part = AffinePart(z=np.atleast_1d(np.asarray(z, dtype=float)), stop=stop, start=start)
        return cls(values=xi0, maturity=maturity, bound=bound, affine=part)

    def total_values(self, ensemble: PathEnsemble) -> Array:
        """Full payoff xi_0 + z . (B_stop - B_start) per path."""
        if self.affine is None:
            return self.values.copy()
        ind = self.affine.indicator(ensemble)
        lin = np.einsum("im,imd,d->m", ind, ensemble.increments, self.affine.z)
        return self.values + lin


@dataclass
class BsdeSolution:
    """Paired (Y, Z) arrays on the grid plus scheme diagnostics.

    Y[i] is valid for stop_index <= i <= maturity; Z[i] for
    stop_index <= i < maturity. For affine terminal data both are the
    reconstituted quantities (shift already added back).
    """

    Y: Array  # (maturity + 1, M)
    Z: Array  # (maturity, M, d)
    grid: object
    generator: Generator
    terminal: TerminalCondition
    stop_index: int = 0
    residual: Array | None = None     # per-step one-step scheme residual (0 by construction)
    clip_fraction: Array | None = None
    step_rules: list | None = field(default=None, repr=False)
    basis: RegressionBasis | None = field(default=None, repr=False)

    @property
    def y0(self) -> float:
        return float(self.Y[self.stop_index].mean())

    def frozen_value(self, i: int, ensemble: PathEnsemble) -> Array:
        """Evaluate the step-i fitted value function on another ensemble.

        The solve stores, per step, the fitted projection rules; applying them
        to a foreign ensemble only reads state up to step i, which makes the
        output F_{t_i}-measurable by construction.
        """
        from .regression import apply_rule

        if self.step_rules is None:
            raise ValueError("solve was run without record_rules=True")
        if i >= self.terminal.maturity:
            return self.terminal.total_values(ensemble)
        rule_e, rules_z = self.step_rules[i - self.stop_index]
        ey = apply_rule(rule_e, ensemble, i, self.basis)
        d = ensemble.dim
        zt = np.empty((ensemble.n_paths, d))
        for k in range(d):
            zt[:, k] = apply_rule(rules_z[k], ensemble, i, self.basis)
        part = self.terminal.affine
        dt = ensemble.grid.dt
        t = ensemble.grid.points[i]
        if part is None:
            return ey + self.generator(t, zt) * dt
        ind = part.indicator_on(ensemble)
        drive = zt + ind[i][:, None] * part.z[None, :]
        shift = np.einsum("im,imd,d->m", ind[:i], ensemble.increments[:i], part.z)
        return ey + self.generator(t, drive) * dt + shift


def default_z_cap(horizon: float, ell: float, bound: float | None) -> float | None:
    """Default truncation level for regressed Z, from the a priori estimate
    that the remaining quadratic variation of Z is at most (1+T) e^{8 k |Y|_inf}
    with k = max(ell, 1/2); the factor 5 leaves headroom so the cap only
    catches regression outliers, never the signal."""
    if bound is None:
        return None
    k = max(ell, 0.5)
    try:
        return 5.0 * math.sqrt((1.0 + horizon) * math.exp(8.0 * k * bound))
    except OverflowError:
        return None


def _fit(ensemble, target, i, basis, weights=None, record=False):
    """Projection fitted values, optionally with the reusable rule."""
    if not record:
        return condexp_regress(ensemble, target, i, basis, weights), None
    from .regression import apply_rule, regress_coefficients

    rule = regress_coefficients(ensemble, target, i, basis, weights)
    return apply_rule(rule, ensemble, i, basis), rule


_vetted_customs: "weakref.WeakSet" = weakref.WeakSet()


def _vet_generator(generator: Generator, dim: int, allow_unchecked: bool) -> None:
    """Custom drivers must honour their declared growth constant before a
    solver pipeline will run them; counterexample demos can override."""
    if generator.kind != "custom" or allow_unchecked or generator in _vetted_customs:
        return
    report = check_h2(generator, generator.ell, default_z_grid(radius=5.0, points=41, dim=dim))
    if not report.passed:
        raise ValueError(
            "custom generator violates its declared growth/gradient bounds "
            f"(worst ratios {report.worst_growth_ratio:.3f} / {report.worst_gradient_ratio:.3f}); "
            "pass allow_unchecked_generator=True to run it anyway"
        )
    _vetted_customs.add(generator)


def solve_bsde(
    terminal: TerminalCondition,
    generator: Generator,
    ensemble: PathEnsemble,
    basis: RegressionBasis,
    z_max: float | None = None,
    stop_index: int = 0,
    record_rules: bool = False,
    weights: Array | None = None,
    weight_paths: Array | None = None,
    increment_drift: Array | None = None,
    allow_unchecked_generator: bool = False,
) -> BsdeSolution:
    """Backward solve of the driver equation for the given terminal data.

    The weighting arguments support solves under a reweighted measure: the
    projections become weighted least squares (static `weights` of shape (M,)
    or per-step `weight_paths` of shape (>= maturity + 1, M)) and the Z
    targets use the drift-corrected increments dB_i - drift_i dt with
    `increment_drift` of shape (N, M, d).
    """
    _vet_generator(generator, ensemble.dim, allow_unchecked_generator)
    j = terminal.maturity
    if not (0 <= stop_index < j + 1):
        raise ValueError(f"stop_index {stop_index} outside [0, {j}]")
    N, M, d = ensemble.increments.shape
    if j > N:
        raise ValueError(f"maturity {j} beyond grid {N}")
    dt = ensemble.grid.dt
    tpts = ensemble.grid.points

    part = terminal.affine
    ind = part.indicator(ensemble) if part is not None else None

    Y = np.zeros((j + 1, M))
    Z = np.zeros((j, M, d))
    Y[j] = terminal.values
    residual = np.zeros(j)
    clip_frac = np.zeros(j)
    rules = [] if record_rules else None
    guard = None if terminal.bound is None else 10.0 * max(terminal.bound, 1e-12)

    for i in range(j - 1, stop_index - 1, -1):
        w_i = weights if weight_paths is None else weight_paths[i]
        ey, rule_e = _fit(ensemble, Y[i + 1], i, basis, w_i, record_rules)
        mart = Y[i + 1] - ey
        zt = np.empty((M, d))
        rules_z = [] if record_rules else None
        db = ensemble.increments[i]
        if increment_drift is not None:
            db = db - increment_drift[i] * dt
        for k in range(d):
            fitted, rule_k = _fit(ensemble, mart * db[:, k] / dt, i, basis, w_i, record_rules)
            zt[:, k] = fitted
            if record_rules:
                rules_z.append(rule_k)
        if z_max is not None:
            norms = np.linalg.norm(zt, axis=1)
            over = norms > z_max
            clip_frac[i] = over.mean()
            if np.any(over):
                zt[over] *= (z_max / norms[over])[:, None]
        Z[i] = zt
        drive = zt if ind is None else zt + ind[i][:, None] * part.z[None, :]
        Y[i] = ey + generator(tpts[i], drive) * dt
        if guard is not None and np.max(np.abs(Y[i])) > guard:
            raise DivergenceError(
                f"|Y| exceeded 10 x bound ({guard:.3g}) at step {i}: unstable configuration"
            )
        if record_rules:
            rules.insert(0, (rule_e, rules_z))

    if part is not None:
        zshift = np.einsum("im,imd,d->im", ind, ensemble.increments, part.z)
        running = np.zeros((j + 1, M))
        np.cumsum(zshift[:j], axis=0, out=running[1:])
        Y += running
        Z += ind[:j, :, None] * part.z[None, None, :]

    return BsdeSolution(
        Y=Y, Z=Z, grid=ensemble.grid,
        generator=generator, terminal=terminal, stop_index=stop_index,
        residual=residual, clip_fraction=clip_frac,
        step_rules=rules, basis=basis,
    )


def solve_shifted(
    xi0: Array,
    z: Array,
    tau: StoppingTime | int,
    generator: Generator,
    ensemble: PathEnsemble,
    basis: RegressionBasis,
    bound: float | None = None,
    **kwargs,
) -> BsdeSolution:
    """Solve for terminal data xi_0 + z B_tau via the shifted system."""
    terminal = TerminalCondition.with_affine(
        xi0=xi0, z=z, stop=tau, maturity=ensemble.grid.steps, bound=bound
    )
    return solve_bsde(terminal, generator, ensemble, basis, **kwargs)


def conditional_g_expectation(
    terminal: TerminalCondition,
    generator: Generator,
    ensemble: PathEnsemble,
    basis: RegressionBasis,
    step: int,
    **kwargs,
) -> Array:
    """Y_step of the backward solve: the driver-consistent conditional evaluation."""
    if step >= terminal.maturity:
        return terminal.total_values(ensemble)
    sol = solve_bsde(terminal, generator, ensemble, basis, stop_index=step, **kwargs)
    return sol.Y[step]


def cole_hopf_oracle(
    gamma: float,
    terminal: TerminalCondition,
    ensemble: PathEnsemble,
    basis: RegressionBasis,
    stop_index: int = 0,
) -> Array:
    """Exponential-transform oracle for the purely quadratic driver (gamma/2)|z|^2.

    Carries U_i = Proj_i[U_{i+1}] with U_j = exp(gamma xi) as a multiplicative
    chain and returns Y = log(U)/gamma, so its information sets match the
    backward scheme step for step. Independent of the solver path: no driver
    evaluation, no Z regression.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    j = terminal.maturity
    M = ensemble.n_paths
    U = np.zeros((j + 1, M))
    U[j] = np.exp(gamma * terminal.total_values(ensemble))
    for i in range(j - 1, stop_index - 1, -1):
        U[i] = condexp_regress(ensemble, U[i + 1], i, basis)
        if np.min(U[i]) <= 0.0:
            raise BasisInadequacyError(
                f"log-chain projection non-positive at step {i}; widen the basis"
            )
    Y = np.zeros((j + 1, M))
    Y[stop_index:] = np.log(U[stop_index:]) / gamma
    return Y


def deterministic_gexp_affine(
    generator: Generator,
    z: Array,
    t: float,
    b_value: Array | float,
    horizon: float,
) -> Array | float:
    """Closed form z . B_t + int_t^T g(s, z) ds for deterministic drivers.

    Time-independent drivers integrate exactly as (T - t) g(z); time-dependent
    ones go through adaptive quadrature.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    b = np.atleast_1d(np.asarray(b_value, dtype=float))
    lin = float(np.dot(z, b)) if b.shape == z.shape else float(z[0] * b[0])
    if generator.time_dependent:
        val, _ = integrate.quad(lambda s: float(generator(s, z)), t, horizon)
    else:
        val = (horizon - t) * float(generator(0.0, z))
    return lin + val
