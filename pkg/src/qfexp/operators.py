"""
Conditional nonlinear expectation operators over a fixed path ensemble.

An operator maps terminal data to its conditional evaluation at any grid
step. Concrete families:

    LinearExpectation       projection chain (zero driver)
    GExpectation            backward solve for a quadratic driver
    AffineFormulaExpectation  closed form for deterministic drivers on
                             affine payoffs (used as an exact oracle)
    ExternalOperator        subprocess protocol for auditing third-party
                             black boxes
    ConstantBiasOperator / StateGainOperator   fault injections for the
                             planted-violation tests

Operators are calibrated on their own ensemble; `evaluate_frozen` re-applies
the fitted step functions to a foreign ensemble, which is what the
measurability probe exercises (output at step i reads only state up to i).
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .bsde import BsdeSolution, TerminalCondition, default_z_cap, solve_bsde
from .generators import Generator, zero_generator
from .regression import RegressionBasis
from .stochastic import PathEnsemble

Array = np.ndarray

__all__ = [
    "ExpectationOperator",
    "GExpectation",
    "LinearExpectation",
    "AffineFormulaExpectation",
    "ExternalOperator",
    "ConstantBiasOperator",
    "StateGainOperator",
    "operator_from_spec",
]


class ExpectationOperator:
    """Family {E[. | F_{t_i}]}_i acting on TerminalCondition payloads."""

    name: str = "abstract"
    domain: str = "bounded"  # or "affine-extended"
    time_dependent: bool = False

    ensemble: PathEnsemble
    basis: RegressionBasis

    def evaluate_path(self, xi: TerminalCondition, lo: int = 0) -> Array:
        """Values on all steps lo..maturity, shape (maturity + 1, M)."""
        raise NotImplementedError

    def evaluate(self, xi: TerminalCondition, i: int) -> Array:
        if i >= xi.maturity:
            return xi.total_values(self.ensemble)
        return self.evaluate_path(xi, lo=i)[i]

    def evaluate_frozen(self, xi: TerminalCondition, i: int, ensemble: PathEnsemble) -> Array:
        raise NotImplementedError(f"{self.name} does not support frozen evaluation")

    def with_basis(self, basis: RegressionBasis) -> "ExpectationOperator":
        raise NotImplementedError


@dataclass
class GExpectation(ExpectationOperator):
    """Driver-consistent conditional expectation via the backward scheme."""

    generator: Generator
    ensemble: PathEnsemble
    basis: RegressionBasis
    z_max: float | str | None = "auto"
    name: str = "g-expectation"
    domain: str = "affine-extended"

    @property
    def time_dependent(self) -> bool:
        return self.generator.time_dependent

    def _cap(self, xi: TerminalCondition) -> float | None:
        if self.z_max == "auto":
            return default_z_cap(self.ensemble.grid.horizon, self.generator.ell, xi.bound)
        return self.z_max

    def solve(self, xi: TerminalCondition, lo: int = 0, record_rules: bool = False) -> BsdeSolution:
        return solve_bsde(
            xi, self.generator, self.ensemble, self.basis,
            z_max=self._cap(xi), stop_index=lo, record_rules=record_rules,
        )

    def evaluate_path(self, xi: TerminalCondition, lo: int = 0) -> Array:
        return self.solve(xi, lo=lo).Y

    def evaluate_frozen(self, xi: TerminalCondition, i: int, ensemble: PathEnsemble) -> Array:
        if i >= xi.maturity:
            return xi.total_values(ensemble)
        return self.solve(xi, lo=i, record_rules=True).frozen_value(i, ensemble)

    def with_basis(self, basis: RegressionBasis) -> "GExpectation":
        return replace(self, basis=basis)


def LinearExpectation(ensemble: PathEnsemble, basis: RegressionBasis) -> GExpectation:
    """Plain regression conditional expectation: the zero-driver member."""
    return GExpectation(
        generator=zero_generator(), ensemble=ensemble, basis=basis,
        z_max=None, name="linear",
    )


@dataclass
class AffineFormulaExpectation(ExpectationOperator):
    """Closed-form evaluation for deterministic drivers on affine payoffs.

    For payoffs c + z . (B_stop - B_start) with a deterministic-in-time driver
    the conditional value is c + z . (B elapsed window) + integral of g(., z)
    over the remaining window; no regression enters, so this is the exact
    reference the numerical operators are audited against.
    """

    generator: Generator
    ensemble: PathEnsemble
    basis: RegressionBasis = None
    name: str = "affine-formula"
    domain: str = "affine-extended"

    @property
    def time_dependent(self) -> bool:
        return self.generator.time_dependent

    def evaluate_path(self, xi: TerminalCondition, lo: int = 0) -> Array:
        return self._values(xi, self.ensemble, lo)

    def _values(self, xi: TerminalCondition, ensemble: PathEnsemble, lo: int) -> Array:
        if xi.affine is None:
            if np.ptp(xi.values) != 0.0:
                raise ValueError("affine-formula operator needs constant or affine payoffs")
            out = np.tile(xi.values, (xi.maturity + 1, 1))
            return out
        part = xi.affine
        if np.ptp(xi.values) != 0.0:
            raise ValueError("affine-formula operator needs a constant bounded part")
        ind = part.indicator_on(ensemble)[: xi.maturity]  # (j, M)
        M = ensemble.n_paths
        dt = ensemble.grid.dt
        elapsed = np.zeros((xi.maturity + 1, M))
        np.cumsum(np.einsum("im,imd,d->im", ind, ensemble.increments[: xi.maturity], part.z), axis=0, out=elapsed[1:])
        zvals = np.atleast_2d(part.z)
        if self.generator.time_dependent:
            gpath = np.array([float(self.generator(t, part.z)) for t in ensemble.grid.points[: xi.maturity]])
        else:
            gpath = np.full(xi.maturity, float(self.generator(0.0, part.z)))
        # per-path remaining drift: sum over window steps >= i of g(t_j, z) dt
        contrib = ind * gpath[:, None] * dt  # (j, M)
        remaining = np.zeros((xi.maturity + 1, M))
        remaining[:-1] = np.cumsum(contrib[::-1], axis=0)[::-1]
        return xi.values[None, :] + elapsed + remaining

    def evaluate_frozen(self, xi: TerminalCondition, i: int, ensemble: PathEnsemble) -> Array:
        return self._values(xi, ensemble, 0)[i]

    def with_basis(self, basis: RegressionBasis) -> "AffineFormulaExpectation":
        return replace(self, basis=basis)


@dataclass
class ConstantBiasOperator(ExpectationOperator):
    """Fault injection: adds a constant bias at every step (breaks constant preservation)."""

    base: ExpectationOperator
    bias: float = 0.1
    name: str = "fault-constant-bias"

    @property
    def ensemble(self):
        return self.base.ensemble

    @property
    def basis(self):
        return self.base.basis

    @property
    def domain(self):
        return self.base.domain

    def evaluate_path(self, xi, lo=0):
        return self.base.evaluate_path(xi, lo=lo) + self.bias

    def evaluate(self, xi, i):
        return self.base.evaluate(xi, i) + self.bias

    def with_basis(self, basis):
        return ConstantBiasOperator(self.base.with_basis(basis), self.bias)


@dataclass
class StateGainOperator(ExpectationOperator):
    """Fault injection: multiplies the value by (1 + gain) wherever B_t > 0.

    A constant additive bias cancels when two evaluations are subtracted, so
    the stability (domination) checks need a state-dependent fault to detect.
    """

    base: ExpectationOperator
    gain: float = 0.1
    component: int = 0
    name: str = "fault-state-gain"

    @property
    def ensemble(self):
        return self.base.ensemble

    @property
    def basis(self):
        return self.base.basis

    @property
    def domain(self):
        return self.base.domain

    def _gain_row(self, i):
        flag = self.base.ensemble.values[i, :, self.component] > 0.0
        return 1.0 + self.gain * flag

    def evaluate_path(self, xi, lo=0):
        out = self.base.evaluate_path(xi, lo=lo).copy()
        for i in range(lo, xi.maturity + 1):
            out[i] *= self._gain_row(i)
        return out

    def evaluate(self, xi, i):
        return self.base.evaluate(xi, i) * self._gain_row(i)

    def with_basis(self, basis):
        return StateGainOperator(self.base.with_basis(basis), self.gain, self.component)


class ExternalOperator(ExpectationOperator):
    """Audit adapter for third-party operators over a subprocess protocol.

    Per evaluation the adapter writes the ensemble to an .npz file once, then
    sends one JSON request on the child's stdin:

        {"ensemble_file": path, "step": i,
         "payoff": {"values": [...], "maturity": j,
                    "affine": null | {"z": [...], "start": s, "stop": e|[e_m...]}}}

    and expects a JSON array of M floats on stdout. See docs/external_operator.md.
    """

    name = "external"
    domain = "bounded"

    def __init__(self, command: list[str], ensemble: PathEnsemble, basis: RegressionBasis | None = None):
        self.command = list(command)
        self.ensemble = ensemble
        self.basis = basis
        self._ensemble_file: Path | None = None

    def _materialize(self) -> Path:
        if self._ensemble_file is None:
            tmp = tempfile.NamedTemporaryFile(suffix=".npz", delete=False)
            np.savez(
                tmp,
                points=self.ensemble.grid.points,
                increments=self.ensemble.increments,
                values=self.ensemble.values,
            )
            tmp.close()
            self._ensemble_file = Path(tmp.name)
        return self._ensemble_file

    def _payoff_payload(self, xi: TerminalCondition) -> dict:
        affine = None
        if xi.affine is not None:
            stop = xi.affine.stop
            stop_payload = int(stop) if isinstance(stop, int) else stop.indices.tolist()
            affine = {"z": xi.affine.z.tolist(), "start": xi.affine.start, "stop": stop_payload}
        return {"values": xi.values.tolist(), "maturity": xi.maturity, "affine": affine}

    def evaluate(self, xi: TerminalCondition, i: int) -> Array:
        request = {
            "ensemble_file": str(self._materialize()),
            "step": int(i),
            "payoff": self._payoff_payload(xi),
        }
        proc = subprocess.run(
            self.command, input=json.dumps(request).encode(),
            stdout=subprocess.PIPE, check=True,
        )
        out = np.asarray(json.loads(proc.stdout.decode()), dtype=float)
        if out.shape != (self.ensemble.n_paths,):
            raise ValueError(f"external operator returned shape {out.shape}")
        return out

    def evaluate_path(self, xi: TerminalCondition, lo: int = 0) -> Array:
        rows = [self.evaluate(xi, i) for i in range(lo, xi.maturity + 1)]
        out = np.zeros((xi.maturity + 1, self.ensemble.n_paths))
        out[lo:] = np.stack(rows)
        return out

    def with_basis(self, basis):
        clone = ExternalOperator(self.command, self.ensemble, basis)
        clone._ensemble_file = self._ensemble_file
        return clone


def operator_from_spec(spec: dict, ensemble: PathEnsemble, basis: RegressionBasis) -> ExpectationOperator:
    """Build an operator from a config mapping {kind, ...}."""
    from .generators import generator_from_spec

    kind = spec["kind"]
    if kind == "linear":
        return LinearExpectation(ensemble, basis)
    if kind == "gexp":
        return GExpectation(generator=generator_from_spec(spec["generator"]), ensemble=ensemble, basis=basis)
    if kind == "affine-formula":
        return AffineFormulaExpectation(generator=generator_from_spec(spec["generator"]), ensemble=ensemble, basis=basis)
    if kind == "external":
        return ExternalOperator(spec["command"], ensemble, basis)
    if kind == "fault-bias":
        return ConstantBiasOperator(operator_from_spec(spec["base"], ensemble, basis), spec.get("bias", 0.1))
    if kind == "fault-state-gain":
        return StateGainOperator(operator_from_spec(spec["base"], ensemble, basis), spec.get("gain", 0.1))
    raise ValueError(f"unknown operator kind {kind!r}")
