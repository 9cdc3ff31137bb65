"""
Cross-sectional least-squares projection standing in for conditional expectation.

The estimator of E[xi | F_{t_i}] is the fitted value of an ordinary (or
weighted) least-squares regression of xi on basis functions of the path state
at step i. Two base families are provided:

    polynomial      -- monomials of B_{t_i} up to a total degree
    piecewise-local -- indicators of equal-probability bins of B_{t_i} (d = 1)

A basis can be augmented with extra state columns (functions of the whole
path prefix). Augmented columns may also interact multiplicatively with the
base block, which makes the fit block-diagonal across an indicator event:
that is what lets indicator identities hold exactly in the solvers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Callable

import numpy as np

from .stochastic import PathEnsemble

Array = np.ndarray

__all__ = ["RegressionBasis", "DegenerateBasisError", "condexp_regress", "polynomial_basis", "piecewise_basis"]


class DegenerateBasisError(ValueError):
    """Design matrix rank-deficient where generic samples should give full rank."""


@dataclass(frozen=True)
class _Extra:
    func: Callable[[PathEnsemble, int], Array]
    interact: bool


@dataclass(frozen=True)
class RegressionBasis:
    """Basis-function family for the cross-sectional projections.

    kind      : "polynomial" or "piecewise"
    order     : polynomial total degree, or number of bins
    extras    : additional state columns appended to (or interacted with)
                the base block
    strict    : raise DegenerateBasisError on rank-deficient designs at
                interior steps (disabled automatically for augmented bases,
                where collinearity with the base block is legitimate)
    """

    kind: str = "polynomial"
    order: int = 3
    extras: tuple[_Extra, ...] = field(default_factory=tuple)
    strict: bool = True

    def augment(self, func: Callable[[PathEnsemble, int], Array], interact: bool = False) -> "RegressionBasis":
        return RegressionBasis(
            kind=self.kind,
            order=self.order,
            extras=self.extras + (_Extra(func, interact),),
            strict=False,
        )

    def _base_block(self, ensemble: PathEnsemble, i: int) -> Array:
        x = ensemble.values[i]  # (M, d)
        M, d = x.shape
        if self.kind == "polynomial":
            if d == 1:
                cols = [x[:, 0] ** p for p in range(self.order + 1)]
            else:
                cols = []
                for powers in product(range(self.order + 1), repeat=d):
                    if sum(powers) <= self.order:
                        cols.append(np.prod([x[:, k] ** p for k, p in enumerate(powers)], axis=0))
            return np.column_stack(cols)
        if self.kind == "piecewise":
            if d != 1:
                raise ValueError("piecewise-local bins are implemented for d = 1 only")
            if self.order < 2:
                raise ValueError("piecewise basis needs at least 2 bins")
            xs = x[:, 0]
            edges = np.quantile(xs, np.linspace(0.0, 1.0, self.order + 1)[1:-1])
            cell = np.searchsorted(edges, xs)
            block = np.zeros((M, self.order))
            block[np.arange(M), cell] = 1.0
            return block
        raise ValueError(f"unknown basis kind {self.kind!r}")

    def design_matrix(self, ensemble: PathEnsemble, i: int) -> Array:
        base = self._base_block(ensemble, i)
        blocks = [base]
        for extra in self.extras:
            col = np.asarray(extra.func(ensemble, i), dtype=float)
            if col.ndim == 1:
                col = col[:, None]
            if extra.interact:
                blocks.append((col[:, :, None] * base[:, None, :]).reshape(base.shape[0], -1))
            else:
                blocks.append(col)
        return np.column_stack(blocks)


def polynomial_basis(degree: int = 3) -> RegressionBasis:
    return RegressionBasis(kind="polynomial", order=degree)


def piecewise_basis(bins: int = 20) -> RegressionBasis:
    return RegressionBasis(kind="piecewise", order=bins)


def _bin_rule(ensemble: PathEnsemble, target: Array, i: int, bins: int,
              weights: Array | None) -> tuple[Array, Array]:
    """Equal-probability bin edges and per-bin (weighted) means of the target.

    The least-squares solution on an indicator design is exactly the vector
    of cell means, so this is the piecewise projection without the matrix.
    """
    xs = ensemble.values[i, :, 0]
    edges = np.quantile(xs, np.linspace(0.0, 1.0, bins + 1)[1:-1])
    cell = np.searchsorted(edges, xs)
    w = np.ones_like(target) if weights is None else np.asarray(weights, dtype=float)
    num = np.bincount(cell, weights=w * target, minlength=bins)
    den = np.bincount(cell, weights=w, minlength=bins)
    means = np.divide(num, den, out=np.full(bins, target.mean()), where=den > 0)
    return edges, means


def condexp_regress(
    ensemble: PathEnsemble,
    target: Array,
    i: int,
    basis: RegressionBasis,
    weights: Array | None = None,
) -> Array:
    """Fitted values of the least-squares projection of `target` onto basis(state_i).

    Constant targets are returned unchanged (the constant function is in every
    basis) so that constant-preservation identities hold bit-exactly. At step
    0 the state is degenerate and the projection collapses to the (weighted)
    cross-sectional mean.
    """
    target = np.asarray(target, dtype=float)
    if target.shape != (ensemble.n_paths,):
        raise ValueError(f"target shape {target.shape} != ({ensemble.n_paths},)")
    if np.ptp(target) == 0.0:
        return target.copy()

    if i == 0:
        if weights is None:
            return np.full_like(target, target.mean())
        w = np.asarray(weights, dtype=float)
        return np.full_like(target, float(np.dot(w, target) / w.sum()))

    if basis.kind == "piecewise" and not basis.extras and ensemble.dim == 1:
        edges, means = _bin_rule(ensemble, target, i, basis.order, weights)
        return means[np.searchsorted(edges, ensemble.values[i, :, 0])]

    X = basis.design_matrix(ensemble, i)
    if not np.any(np.ptp(X, axis=0) > 0.0):
        if weights is None:
            return np.full_like(target, target.mean())
        w = np.asarray(weights, dtype=float)
        return np.full_like(target, float(np.dot(w, target) / w.sum()))

    if weights is None:
        beta, _, rank, _ = np.linalg.lstsq(X, target, rcond=None)
    else:
        sw = np.sqrt(np.asarray(weights, dtype=float))
        beta, _, rank, _ = np.linalg.lstsq(X * sw[:, None], target * sw, rcond=None)
    if basis.strict and rank < X.shape[1]:
        raise DegenerateBasisError(
            f"design matrix at step {i} has rank {rank} < {X.shape[1]} columns"
        )
    return X @ beta


def regress_coefficients(
    ensemble: PathEnsemble,
    target: Array,
    i: int,
    basis: RegressionBasis,
    weights: Array | None = None,
) -> tuple[str, object]:
    """Like condexp_regress but return the fitted rule itself.

    The rule is ("const", c) or ("lsq", beta); apply_rule evaluates it on any
    ensemble, which is what makes solved operators measurable by construction.
    """
    target = np.asarray(target, dtype=float)
    if np.ptp(target) == 0.0:
        return ("const", float(target[0]))
    if i == 0:
        if weights is None:
            return ("const", float(target.mean()))
        w = np.asarray(weights, dtype=float)
        return ("const", float(np.dot(w, target) / w.sum()))
    if basis.kind == "piecewise" and not basis.extras and ensemble.dim == 1:
        edges, means = _bin_rule(ensemble, target, i, basis.order, weights)
        return ("pw", (edges, means))
    X = basis.design_matrix(ensemble, i)
    if not np.any(np.ptp(X, axis=0) > 0.0):
        if weights is None:
            return ("const", float(target.mean()))
        w = np.asarray(weights, dtype=float)
        return ("const", float(np.dot(w, target) / w.sum()))
    if weights is None:
        beta, _, _, _ = np.linalg.lstsq(X, target, rcond=None)
    else:
        sw = np.sqrt(np.asarray(weights, dtype=float))
        beta, _, _, _ = np.linalg.lstsq(X * sw[:, None], target * sw, rcond=None)
    return ("lsq", beta)


def apply_rule(rule: tuple[str, object], ensemble: PathEnsemble, i: int, basis: RegressionBasis) -> Array:
    kind, payload = rule
    if kind == "const":
        return np.full(ensemble.n_paths, payload)
    if kind == "pw":
        edges, means = payload
        return means[np.searchsorted(edges, ensemble.values[i, :, 0])]
    return basis.design_matrix(ensemble, i) @ payload
