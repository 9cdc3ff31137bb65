"""
Quadratic driver library and numerical verification of its standing bounds.

A driver is a function g(t, z) with g(t, 0) = 0 whose growth and gradient are
controlled by a single constant ell:

    |g(t, z)|            <= ell (|z| + |z|^2)
    |dg/dz (t, z)|       <= ell (1 + |z|)
    |g(t,z) - g(t,z')|   <= ell (1 + |z| + |z'|) |z - z'|

Shipped kinds:

    canonical(mu)            g(z) = mu (1 + |z|) |z|,        ell = 2 mu
    entropic(gamma)          g(z) = (gamma / 2) |z|^2,       ell = gamma
    lipschitz dominator      g(v) = ell (1 + |z| + |z'|)|v|
    zero                     g = 0
    custom                   expression over (t, z components, r = |z|)

Bound verification is by sampling plus central finite differences; the
difference step scales with (1 + |z|) so the relative error stays bounded
under quadratic growth.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Array = np.ndarray

__all__ = [
    "Generator",
    "GeneratorPair",
    "canonical_generator",
    "entropic_generator",
    "lipschitz_dominator",
    "zero_generator",
    "custom_generator",
    "generator_from_spec",
    "check_h2",
    "check_local_lipschitz",
    "second_derivative_probe",
    "default_z_grid",
]


@dataclass(frozen=True, eq=False)
class Generator:
    """Immutable quadratic driver; eval is pure and broadcasts over z arrays.

    eval takes (t, z) with z of shape (..., d) and returns shape (...).
    Identity semantics (eq=False) keep instances hashable for caches.
    """

    kind: str
    ell: float
    eval: Callable[[float, Array], Array] = field(repr=False)
    params: dict = field(default_factory=dict)
    time_dependent: bool = False

    def __call__(self, t: float, z: Array) -> Array:
        return self.eval(t, np.asarray(z, dtype=float))

    def gradient(self, t: float, z: Array) -> Array:
        """Central finite-difference gradient with step 1e-5 (1 + |z|)."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        h = 1e-5 * (1.0 + np.linalg.norm(z, axis=-1, keepdims=True))
        grad = np.empty_like(z)
        for k in range(z.shape[-1]):
            zp, zm = z.copy(), z.copy()
            zp[..., k] += h[..., 0]
            zm[..., k] -= h[..., 0]
            grad[..., k] = (self(t, zp) - self(t, zm)) / (2.0 * h[..., 0])
        return grad


def _norm(z: Array) -> Array:
    return np.linalg.norm(np.asarray(z, dtype=float), axis=-1)


def canonical_generator(mu: float) -> Generator:
    """g(z) = mu (1 + |z|) |z|; ell = 2 mu covers both growth and gradient."""
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")

    def _eval(t, z):
        r = _norm(z)
        return mu * (1.0 + r) * r

    return Generator(kind="canonical", ell=2.0 * mu, eval=_eval, params={"mu": float(mu)})


def entropic_generator(gamma: float) -> Generator:
    """g(z) = (gamma / 2) |z|^2; ell = gamma."""
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")

    def _eval(t, z):
        r = _norm(z)
        return 0.5 * gamma * r * r

    return Generator(kind="entropic", ell=float(gamma), eval=_eval, params={"gamma": float(gamma)})


def lipschitz_dominator(ell: float, z: Array, z2: Array) -> Generator:
    """g(v) = ell (1 + |z| + |z2|) |v|: the Lipschitz driver dominating local increments."""
    if ell <= 0:
        raise ValueError(f"ell must be positive, got {ell}")
    slope = ell * (1.0 + float(_norm(z)) + float(_norm(z2)))

    def _eval(t, v):
        return slope * _norm(v)

    return Generator(
        kind="lipschitz-dominator",
        ell=float(slope),
        eval=_eval,
        params={"ell": float(ell), "z": np.asarray(z, float), "z2": np.asarray(z2, float)},
    )


def zero_generator() -> Generator:
    return Generator(kind="zero", ell=1e-12, eval=lambda t, z: np.zeros(np.shape(_norm(z))), params={})


_ALLOWED_CALLS = {
    "abs": np.abs, "sqrt": np.sqrt, "exp": np.exp, "log": np.log,
    "sin": np.sin, "cos": np.cos, "tanh": np.tanh,
    "minimum": np.minimum, "maximum": np.maximum,
}
_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load,
    ast.Constant, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub,
    ast.UAdd, ast.Subscript, ast.Index, ast.Tuple,
)


def custom_generator(expression: str, ell: float, time_dependent: bool = True) -> Generator:
    """Driver from a small expression grammar over t, z0..z{d-1}, and r = |z|.

    Example: ``custom_generator("0.5*r**2 + 0.1*sin(t)*r", ell=1.0)``.
    The declared ell is trusted only after check_h2 passes; solver pipelines
    refuse drivers that fail it unless explicitly overridden.
    """
    tree = ast.parse(expression, mode="eval")
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ValueError(f"expression node {type(node).__name__} not allowed")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _ALLOWED_CALLS:
                raise ValueError("only abs/sqrt/exp/log/sin/cos/tanh/minimum/maximum calls allowed")
    code = compile(tree, "<generator>", "eval")

    def _eval(t, z):
        z = np.asarray(z, dtype=float)
        r = _norm(z)
        names = {"t": t, "r": r}
        flat = np.atleast_2d(z) if z.ndim == 1 else z
        for k in range(z.shape[-1]):
            names[f"z{k}"] = z[..., k]
        names["z"] = z[..., 0]
        out = eval(code, {"__builtins__": {}}, {**_ALLOWED_CALLS, **names})
        return np.broadcast_to(np.asarray(out, dtype=float), np.shape(r)).copy()

    return Generator(kind="custom", ell=float(ell), eval=_eval,
                     params={"expression": expression}, time_dependent=time_dependent)


def generator_from_spec(spec: dict) -> Generator:
    """Build a Generator from a {kind, params} config mapping."""
    kind = spec["kind"]
    params = spec.get("params", {})
    if kind == "canonical":
        return canonical_generator(params["mu"])
    if kind == "entropic":
        return entropic_generator(params["gamma"])
    if kind == "lipschitz-dominator":
        return lipschitz_dominator(params["ell"], np.atleast_1d(params["z"]), np.atleast_1d(params["z2"]))
    if kind == "zero":
        return zero_generator()
    if kind == "custom":
        return custom_generator(params["expression"], params["ell"], params.get("time_dependent", True))
    raise ValueError(f"unknown generator kind {kind!r}")


@dataclass(frozen=True)
class GeneratorPair:
    """Lower/upper driver sandwich g1 <= g2."""

    g1: Generator
    g2: Generator

    def verify(self, z_grid: Array, times=(0.0,)) -> bool:
        for t in times:
            if np.any(self.g1(t, z_grid) > self.g2(t, z_grid) + 1e-12):
                return False
        return True


@dataclass(frozen=True)
class BoundReport:
    passed: bool
    worst_growth_ratio: float
    worst_gradient_ratio: float
    worst_point: Array | None = None

    def __bool__(self):
        return self.passed


def default_z_grid(radius: float = 10.0, points: int = 200, dim: int = 1) -> Array:
    """Verification grid: `points` per dimension on [-radius, radius], origin excluded."""
    axes = [np.linspace(-radius, radius, points)] * dim
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    keep = np.linalg.norm(mesh, axis=-1) > 1e-9
    return mesh[keep]


def check_h2(gen: Generator, ell: float, z_grid: Array, times=(0.0, 0.5, 1.0)) -> BoundReport:
    """Verify |g| <= ell(|z|+|z|^2) and |grad g| <= ell(1+|z|) on the grid."""
    z_grid = np.atleast_2d(np.asarray(z_grid, dtype=float))
    r = _norm(z_grid)
    worst_g, worst_d, worst_pt = 0.0, 0.0, None
    ts = times if gen.time_dependent else (times[0],)
    for t in ts:
        vals = gen(t, z_grid)
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError("generator returned non-finite values")
        ratio = np.abs(vals) / (ell * (r + r * r))
        grad = np.linalg.norm(gen.gradient(t, z_grid), axis=-1)
        gratio = grad / (ell * (1.0 + r))
        k = int(np.argmax(ratio))
        if ratio[k] > worst_g:
            worst_g, worst_pt = float(ratio[k]), z_grid[k]
        worst_d = max(worst_d, float(gratio.max()))
    # slack for the finite-difference gradient near kinks
    passed = worst_g <= 1.0 + 1e-9 and worst_d <= 1.0 + 1e-6
    return BoundReport(passed, worst_g, worst_d, worst_pt)


def check_local_lipschitz(gen: Generator, ell: float, pairs, times=(0.0,)) -> BoundReport:
    """Verify |g(t,z) - g(t,z')| <= ell (1 + |z| + |z'|) |z - z'| on sampled pairs."""
    worst, worst_pt = 0.0, None
    for t in times:
        for z, z2 in pairs:
            z = np.atleast_1d(np.asarray(z, dtype=float))
            z2 = np.atleast_1d(np.asarray(z2, dtype=float))
            dz = float(np.linalg.norm(z - z2))
            if dz == 0.0:
                continue
            lhs = abs(float(np.squeeze(gen(t, z))) - float(np.squeeze(gen(t, z2))))
            rhs = ell * (1.0 + np.linalg.norm(z) + np.linalg.norm(z2)) * dz
            ratio = lhs / rhs
            if ratio > worst:
                worst, worst_pt = ratio, z
    return BoundReport(worst <= 1.0 + 1e-9, worst, 0.0, worst_pt)


def second_derivative_probe(gen: Generator, z_grid: Array, t: float = 0.0) -> float:
    """Largest |d2g/dz2| diagonal entry on the grid (diagnostic only).

    Drivers with a kink at z = 0, like the canonical form, blow up here; the
    probe is informational and never gates a pipeline.
    """
    z_grid = np.atleast_2d(np.asarray(z_grid, dtype=float))
    h = 1e-4 * (1.0 + _norm(z_grid))
    worst = 0.0
    for k in range(z_grid.shape[-1]):
        zp, zm = z_grid.copy(), z_grid.copy()
        zp[:, k] += h
        zm[:, k] -= h
        second = (gen(t, zp) - 2.0 * gen(t, z_grid) + gen(t, zm)) / h**2
        worst = max(worst, float(np.abs(second).max()))
    return worst
