"""
Brownian path ensembles on uniform time grids.

Array conventions used throughout the package:

    increments  dB : shape (N, M, d)   -- dB[i, m] covers (t_i, t_{i+1}]
    values      B  : shape (N+1, M, d) -- B[0] = 0, B[i+1] = B[i] + dB[i]

All simulation is driven by the counter-based Philox generator, drawn in
path-major order: enlarging the ensemble from M to M' > M paths leaves the
first M paths bit-identical, so experiments can shrink or grow the ensemble
without perturbing existing paths.

Ensembles are immutable after construction (arrays are marked read-only);
every function here is a pure function of its inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

__all__ = [
    "TimeGrid",
    "PathEnsemble",
    "StoppingTime",
    "make_grid",
    "simulate_brownian",
    "stochastic_integral",
    "first_hitting_time",
    "deterministic_stopping_time",
    "permute_future_increments",
    "ensemble_rows",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < t_1 < ... < t_N = T."""

    horizon: float
    steps: int
    points: Array

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    def index_of(self, t: float) -> int:
        """Nearest grid index for a time t in [0, T]."""
        i = int(round(t / self.dt))
        if not (0 <= i <= self.steps):
            raise ValueError(f"time {t} outside [0, {self.horizon}]")
        return i


def make_grid(horizon: float, steps: int) -> TimeGrid:
    if horizon <= 0:
        raise ValueError(f"horizon must be positive, got {horizon}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    points = np.linspace(0.0, horizon, steps + 1)
    points.flags.writeable = False
    return TimeGrid(horizon=float(horizon), steps=int(steps), points=points)


@dataclass(frozen=True)
class PathEnsemble:
    """M sampled d-dimensional Brownian paths on a fixed grid."""

    grid: TimeGrid
    dim: int
    n_paths: int
    seed: int
    increments: Array  # (N, M, d)
    values: Array      # (N+1, M, d)

    def __post_init__(self):
        self.increments.flags.writeable = False
        self.values.flags.writeable = False

    @property
    def dt(self) -> float:
        return self.grid.dt

    def component(self, i: int, k: int = 0) -> Array:
        """B values of component k at step i, shape (M,)."""
        return self.values[i, :, k]


def simulate_brownian(grid: TimeGrid, dim: int, n_paths: int, seed: int) -> PathEnsemble:
    """Sample i.i.d. N(0, dt I_d) increments and their cumulative sums.

    The Philox stream fills a (M, N, d) block row by row, so path m consumes
    a fixed slice of the stream regardless of how many paths follow it.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    raw = rng.standard_normal((n_paths, grid.steps, dim))
    increments = np.sqrt(grid.dt) * raw.transpose(1, 0, 2)
    values = np.zeros((grid.steps + 1, n_paths, dim))
    np.cumsum(increments, axis=0, out=values[1:])
    return PathEnsemble(
        grid=grid,
        dim=dim,
        n_paths=n_paths,
        seed=int(seed),
        increments=np.ascontiguousarray(increments),
        values=values,
    )


def _as_integrand(ensemble: PathEnsemble, Z: Array) -> Array:
    """Broadcast Z to shape (N, M, d)."""
    N, M, d = ensemble.increments.shape
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 2 and d == 1:
        Z = Z[:, :, None]
    if Z.shape != (N, M, d):
        raise ValueError(f"integrand shape {Z.shape} incompatible with ensemble {(N, M, d)}")
    return Z


def stochastic_integral(ensemble: PathEnsemble, Z: Array) -> Array:
    """Ito-forward Riemann sum sum_i <Z_i, dB_i> per path, shape (M,).

    Z must be adapted: the step-i value multiplies the step-i increment.
    """
    Z = _as_integrand(ensemble, Z)
    return np.einsum("imd,imd->m", Z, ensemble.increments)


def cumulative_stochastic_integral(ensemble: PathEnsemble, Z: Array) -> Array:
    """Running integral (int_0^{t_i} Z dB)_i, shape (N+1, M)."""
    Z = _as_integrand(ensemble, Z)
    out = np.zeros((ensemble.grid.steps + 1, ensemble.n_paths))
    np.cumsum(np.einsum("imd,imd->im", Z, ensemble.increments), axis=0, out=out[1:])
    return out


@dataclass(frozen=True)
class StoppingTime:
    """Grid-valued stopping time: tau[m] is a grid index in {0, ..., N}.

    For first-hitting times, `spec` records the rule (component, level) so the
    time can be re-derived on another ensemble.
    """

    indices: Array  # (M,) int
    kind: str  # "deterministic" | "first-hitting"
    grid: TimeGrid = field(repr=False, default=None)
    spec: dict | None = None

    def __post_init__(self):
        self.indices.flags.writeable = False

    @property
    def times(self) -> Array:
        return self.grid.points[self.indices]

    def min_with(self, other: "StoppingTime") -> "StoppingTime":
        return StoppingTime(
            indices=np.minimum(self.indices, other.indices),
            kind="deterministic" if self.kind == other.kind == "deterministic" else "first-hitting",
            grid=self.grid,
        )


def deterministic_stopping_time(ensemble: PathEnsemble, index: int) -> StoppingTime:
    if not (0 <= index <= ensemble.grid.steps):
        raise ValueError(f"index {index} outside grid")
    return StoppingTime(
        indices=np.full(ensemble.n_paths, index, dtype=np.int64),
        kind="deterministic",
        grid=ensemble.grid,
    )


def first_hitting_time(ensemble: PathEnsemble, component: int, level: float) -> StoppingTime:
    """First grid index with |B_component| >= level, else N.

    The scan only reads B[0..i] to decide {tau <= i}, so the result is
    adapted by construction; level = +inf is the never-hit sentinel.
    """
    if not (0 <= component < ensemble.dim):
        raise ValueError(f"component {component} outside 0..{ensemble.dim - 1}")
    N = ensemble.grid.steps
    spec = {"component": component, "level": float(level)}
    if math.isinf(level):
        return StoppingTime(
            indices=np.full(ensemble.n_paths, N, dtype=np.int64),
            kind="first-hitting",
            grid=ensemble.grid,
            spec=spec,
        )
    hit = np.abs(ensemble.values[:, :, component]) >= level  # (N+1, M)
    any_hit = hit.any(axis=0)
    first = np.argmax(hit, axis=0)
    first[~any_hit] = N
    return StoppingTime(indices=first.astype(np.int64), kind="first-hitting", grid=ensemble.grid, spec=spec)


def indicator_before(ensemble: PathEnsemble, stop: StoppingTime | int, start: int = 0) -> Array:
    """Increment-window indicator 1_{start <= i < stop} of shape (N, M).

    With stop a stopping time tau this selects exactly the increments whose
    sum is B_{tau} - B_{start}.
    """
    N, M = ensemble.grid.steps, ensemble.n_paths
    steps = np.arange(N)[:, None]
    stop_idx = stop.indices[None, :] if isinstance(stop, StoppingTime) else int(stop)
    return ((steps >= start) & (steps < stop_idx)).astype(float)


def permute_future_increments(ensemble: PathEnsemble, step: int, shift: int = 1) -> PathEnsemble:
    """Rebuild the ensemble with increments from `step` onward rolled across paths.

    B[0..step] is untouched; anything adapted to F_{t_step} must be invariant
    under this operation. Used by the measurability probe.
    """
    increments = ensemble.increments.copy()
    increments[step:] = np.roll(increments[step:], shift, axis=1)
    values = np.zeros_like(ensemble.values)
    np.cumsum(increments, axis=0, out=values[1:])
    return PathEnsemble(
        grid=ensemble.grid,
        dim=ensemble.dim,
        n_paths=ensemble.n_paths,
        seed=ensemble.seed,
        increments=increments,
        values=values,
    )


def ensemble_rows(ensemble: PathEnsemble):
    """Yield (m, i, t_i, B components) rows for CSV dumps."""
    t = ensemble.grid.points
    for m in range(ensemble.n_paths):
        for i in range(ensemble.grid.steps + 1):
            yield (m, i, t[i], *ensemble.values[i, m, :])
