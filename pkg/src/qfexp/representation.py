"""
Recovery of the driver behind a black-box conditional expectation.

The probe payoffs are small Brownian increments: for an operator E the cell
estimate at (t, z) is

    ghat(t, z) ~= E[ z . (B_{t+h} - B_t) ] / h,

refined over a shrinking h-schedule (first-order extrapolation for
time-dependent operators, smallest h directly for time-independent ones).
For driver-consistent operators the probe is exact up to the time-Riemann
sum: the evaluation of the pure-increment payoff equals the integral of the
driver over the window.

Companion checks: increment independence from the past (quartile binning of
the conditioning state), one-sided dominance of linear-payoff differences by
the Lipschitz comparison value, the local Lipschitz modulus of the recovered
surface, a least-squares fit of the one-parameter form mu (1 + |z|) |z|, and
an end-to-end audit that re-solves test payoffs with the recovered driver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import TerminalCondition, solve_bsde
from .generators import Generator
from .operators import ExpectationOperator
from .regression import RegressionBasis
from .stochastic import PathEnsemble
from .tolerances import ABS_FLOOR, REGRESSION_RTOL

Array = np.ndarray

__all__ = [
    "CanonicalProcess",
    "RecoveredGenerator",
    "MuFit",
    "canonical_process",
    "recover_generator",
    "check_h6_independence",
    "check_h4_domination",
    "fit_canonical_mu",
    "check_recovered_lipschitz",
    "verify_representation",
    "default_recovery_z_grid",
]


@dataclass
class CanonicalProcess:
    """Test submartingale ell (|z| + |z|^2) t + z B_t and its drift part."""

    z: Array
    ell: float
    paths: Array   # (N+1, M): full process
    drift: Array   # (N+1,): the deterministic part ell (|z| + |z|^2) t
    A: Array | None = None
    h: Array | None = None

    @property
    def drift_rate(self) -> float:
        r = float(np.linalg.norm(self.z))
        return self.ell * (r + r * r)


def canonical_process(z: Array, ell: float, ensemble: PathEnsemble) -> CanonicalProcess:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    r = float(np.linalg.norm(z))
    drift = ell * (r + r * r) * ensemble.grid.points
    paths = drift[:, None] + ensemble.values @ z
    return CanonicalProcess(z=z, ell=ell, paths=paths, drift=drift)


@dataclass
class RecoveredGenerator:
    """Recovered driver surface on a (t, z) grid with per-cell standard errors."""

    t_values: Array          # (nt,)
    z_values: Array          # (nz, d)
    ghat: Array              # (nt, nz)
    se: Array                # (nt, nz)
    spread: Array            # (nt, nz) range across the h-schedule
    h_schedule: tuple
    nonconvergent: Array     # (nt, nz) bool: spread > 5 SE + floor

    def surface_rows(self):
        for a, t in enumerate(self.t_values):
            for b, z in enumerate(self.z_values):
                yield {
                    "t": repr(float(t)),
                    **{f"z{k}": repr(float(z[k])) for k in range(len(z))},
                    "ghat": repr(float(self.ghat[a, b])),
                    "se": repr(float(self.se[a, b])),
                    "spread": repr(float(self.spread[a, b])),
                }


def default_recovery_z_grid(dim: int = 1, lo: float = -3.0, hi: float = 3.0, count: int = 9) -> Array:
    pts = np.linspace(lo, hi, count)
    if dim == 1:
        return pts[:, None]
    from itertools import product
    return np.array(list(product(pts, repeat=dim)))


def recover_generator(
    op: ExpectationOperator,
    t_values,
    z_values: Array,
    h_schedule=None,
) -> RecoveredGenerator:
    """Increment-probe estimate of the driver on the (t, z) grid.

    Every h in the schedule is rounded to a whole number of grid steps; the
    probe payoff has no bounded part, so it rides entirely on the shifted
    system of the evaluation.
    """
    ens = op.ensemble
    N = ens.grid.steps
    T = ens.grid.horizon
    dt = ens.grid.dt
    M = ens.n_paths
    z_values = np.atleast_2d(np.asarray(z_values, dtype=float))
    t_values = np.asarray(t_values, dtype=float)
    h_schedule = tuple(h_schedule) if h_schedule is not None else (T / 8, T / 16, T / 32)
    h_steps = []
    for h in h_schedule:
        k = max(1, int(round(h / dt)))
        if k not in h_steps:
            h_steps.append(k)
    h_steps.sort(reverse=True)

    nt, nz = len(t_values), len(z_values)
    ghat = np.zeros((nt, nz))
    se = np.zeros((nt, nz))
    spread = np.zeros((nt, nz))
    flags = np.zeros((nt, nz), dtype=bool)
    zeros = np.zeros(M)

    for a, t in enumerate(t_values):
        i0 = ens.grid.index_of(float(t))
        for b in range(nz):
            z = z_values[b]
            per_h = []
            per_se = []
            for k in h_steps:
                i1 = min(N, i0 + k)
                if i1 <= i0:
                    raise ValueError(f"probe time {t} leaves no room for h-window")
                xi = TerminalCondition.with_affine(
                    xi0=zeros, z=z, stop=i1, maturity=i1, bound=None, start=i0,
                )
                vals = op.evaluate(xi, 0)
                h_eff = (i1 - i0) * dt
                per_h.append(float(vals.mean()) / h_eff)
                per_se.append(float(vals.std() / np.sqrt(M)) / h_eff)
            if op.time_dependent and len(per_h) >= 2:
                est = 2.0 * per_h[-1] - per_h[-2]
                cell_se = np.hypot(2.0 * per_se[-1], per_se[-2])
            else:
                est = per_h[-1]
                cell_se = per_se[-1]
            ghat[a, b] = est
            se[a, b] = cell_se
            spread[a, b] = max(per_h) - min(per_h)
            flags[a, b] = spread[a, b] > 5.0 * max(cell_se, ABS_FLOOR) + ABS_FLOOR and op.time_dependent
    return RecoveredGenerator(
        t_values=t_values, z_values=z_values, ghat=ghat, se=se,
        spread=spread, h_schedule=tuple(k * dt for k in h_steps), nonconvergent=flags,
    )


def check_h6_independence(op: ExpectationOperator, s: int, t: int, z: Array,
                          n_bins: int = 4, component: int = 0) -> dict:
    """Past-independence of increment evaluations: E[z (B_t - B_s) | F_s]
    binned by quartiles of B_s should be flat."""
    ens = op.ensemble
    M = ens.n_paths
    z = np.atleast_1d(np.asarray(z, float))
    xi = TerminalCondition.with_affine(
        xi0=np.zeros(M), z=z, stop=t, maturity=t, bound=None, start=s,
    )
    vals = op.evaluate(xi, s)
    state = ens.values[s, :, component]
    edges = np.quantile(state, np.linspace(0, 1, n_bins + 1)[1:-1])
    cell = np.searchsorted(edges, state)
    means = np.array([vals[cell == c].mean() for c in range(n_bins)])
    ses = np.array([
        vals[cell == c].std() / np.sqrt(max((cell == c).sum(), 1)) for c in range(n_bins)
    ])
    overall = float(vals.mean())
    dev = float(np.abs(means - overall).max())
    tol = float(3.0 * np.sqrt((ses**2).max() + (vals.std() / np.sqrt(M)) ** 2) + ABS_FLOOR)
    return {
        "bin_means": means, "bin_ses": ses, "overall": overall,
        "deviation": dev, "tolerance": tol, "passed": bool(dev <= tol),
    }


def check_h4_domination(op: ExpectationOperator, z: Array, z2: Array, mu: float,
                        probe_steps=None) -> dict:
    """Difference of linear-payoff evaluations dominated by the Lipschitz value:

        E[z B_T | F_t] - E[z' B_T | F_t]
            <= (z - z') B_t + mu (1 + |z| + |z'|) |z - z'| (T - t).
    """
    ens = op.ensemble
    N = ens.grid.steps
    T = ens.grid.horizon
    z = np.atleast_1d(np.asarray(z, float))
    z2 = np.atleast_1d(np.asarray(z2, float))
    probe_steps = probe_steps if probe_steps is not None else (0, N // 4, N // 2, 3 * N // 4)
    M = ens.n_paths
    Y1 = op.evaluate_path(TerminalCondition.with_affine(np.zeros(M), z, N, N, bound=None))
    Y2 = op.evaluate_path(TerminalCondition.with_affine(np.zeros(M), z2, N, N, bound=None))
    slope = mu * (1.0 + np.linalg.norm(z) + np.linalg.norm(z2)) * np.linalg.norm(z - z2)
    worst = -np.inf
    for i in probe_steps:
        rhs = ens.values[i] @ (z - z2) + slope * (T - ens.grid.points[i])
        worst = max(worst, float((Y1[i] - Y2[i] - rhs).max()))
    scale = max(1.0, slope * T)
    return {"worst_excess": worst, "passed": bool(worst <= REGRESSION_RTOL * scale + ABS_FLOOR)}


@dataclass
class MuFit:
    """Least-squares fit of the one-parameter driver mu (1 + |z|) |z|."""

    mu_hat: float
    residual_rms: float
    se: float
    model_mismatch: bool
    message: str = ""


def fit_canonical_mu(recovered: RecoveredGenerator, exclude_radius: float = 0.05) -> MuFit:
    """Weighted fit mu_hat = sum(ghat w) / sum(w^2), w = (1 + |z|) |z|.

    Cells inside the punctured ball |z| < exclude_radius stay out of the fit
    (the weight vanishes there and the kink degrades conditioning). A
    residual beyond five standard errors flags a shape mismatch instead of
    forcing the parameter.
    """
    radii = np.linalg.norm(recovered.z_values, axis=1)
    keep = radii >= exclude_radius
    if not np.any(keep):
        raise ValueError("z-grid entirely inside the excluded ball")
    w = ((1.0 + radii) * radii)[keep]
    g = recovered.ghat[:, keep]
    ses = recovered.se[:, keep]
    W = np.tile(w, (g.shape[0], 1))
    mu_hat = float((g * W).sum() / (W * W).sum())
    resid = g - mu_hat * W
    residual_rms = float(np.sqrt((resid**2).mean()))
    se = float(np.sqrt((ses**2).mean()) + ABS_FLOOR)
    mismatch = residual_rms > 5.0 * se + ABS_FLOOR * 10
    msg = "operator is quadratic but not of canonical form" if mismatch else ""
    return MuFit(mu_hat=mu_hat, residual_rms=residual_rms, se=se,
                 model_mismatch=bool(mismatch), message=msg)


def check_recovered_lipschitz(recovered: RecoveredGenerator, ell_hat: float) -> dict:
    """Local Lipschitz modulus of the recovered surface against ell_hat."""
    zs = recovered.z_values
    radii = np.linalg.norm(zs, axis=1)
    worst = 0.0
    worst_cell = None
    for a in range(len(recovered.t_values)):
        g = recovered.ghat[a]
        s = recovered.se[a]
        for i in range(len(zs)):
            for j in range(i + 1, len(zs)):
                dz = float(np.linalg.norm(zs[i] - zs[j]))
                if dz == 0.0:
                    continue
                bound = ell_hat * (1.0 + radii[i] + radii[j]) * dz
                excess = abs(g[i] - g[j]) - bound - 3.0 * (s[i] + s[j])
                if excess > worst:
                    worst = excess
                    worst_cell = (float(recovered.t_values[a]), i, j)
    return {"worst_excess": worst, "worst_cell": worst_cell,
            "passed": bool(worst <= ABS_FLOOR * max(1.0, ell_hat))}


def verify_representation(
    op: ExpectationOperator,
    gen_hat: Generator,
    ensemble: PathEnsemble,
    basis: RegressionBasis,
    probe_steps=None,
    payoffs: dict | None = None,
) -> dict:
    """Re-solve test payoffs with the recovered driver and compare to the operator.

    Returns the worst relative deviation over payoffs and probe times, with
    the per-payoff breakdown.
    """
    N = ensemble.grid.steps
    probe_steps = probe_steps if probe_steps is not None else (0, N // 4, N // 2, 3 * N // 4)
    b_T = ensemble.values[N, :, 0]
    if payoffs is None:
        half = ensemble.values[N // 2, :, 0]
        payoffs = {
            "cos": np.cos(b_T),
            "tanh": np.tanh(b_T),
            "gated-tanh": (half > 0) * np.tanh(b_T),
        }
    table = {}
    worst = 0.0
    for name, values in payoffs.items():
        bound = float(np.abs(values).max()) or 1.0
        xi = TerminalCondition.bounded(values, bound, N)
        sol = solve_bsde(xi, gen_hat, ensemble, basis)
        dev = 0.0
        for i in probe_steps:
            ref = op.evaluate(xi, i)
            diff = sol.Y[i] - ref
            scale = max(float(np.sqrt((ref**2).mean())), 0.05 * bound)
            dev = max(dev, float(np.sqrt((diff**2).mean())) / scale)
        table[name] = dev
        worst = max(worst, dev)
    return {"per_payoff": table, "worst_relative_deviation": worst}
