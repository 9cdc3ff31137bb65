import numpy as np
import pytest

import qfexp as q
from qfexp.generators import default_z_grid, generator_from_spec, second_derivative_probe


def test_canonical_values():
    g = q.canonical_generator(1.0)
    assert g(0.0, [0.0]) == 0.0
    assert q.canonical_generator(2.0)(0.0, [1.0]) == pytest.approx(4.0)
    assert q.canonical_generator(0.5)(0.0, [2.0]) == pytest.approx(3.0)
    assert g.ell == 2.0


def test_entropic_values():
    assert q.entropic_generator(1.0)(0.0, [2.0]) == pytest.approx(2.0)
    assert q.entropic_generator(0.5)(0.0, [0.0]) == 0.0
    grad = q.entropic_generator(0.7).gradient(0.0, np.array([[1.0]]))
    assert abs(grad[0, 0]) == pytest.approx(0.7, rel=1e-6)


def test_lipschitz_dominator_values():
    assert q.lipschitz_dominator(1.0, [0.0], [0.0])(0.0, [1.0]) == pytest.approx(1.0)
    assert q.lipschitz_dominator(2.0, [1.0], [1.0])(0.0, [0.5]) == pytest.approx(3.0)
    assert q.lipschitz_dominator(1.0, [1.0], [2.0])(0.0, [0.0]) == 0.0


@pytest.mark.parametrize("bad", [0.0, -1.0])
def test_positive_parameters_required(bad):
    with pytest.raises(ValueError):
        q.canonical_generator(bad)
    with pytest.raises(ValueError):
        q.entropic_generator(bad)


def test_h2_canonical_and_entropic_pass():
    zg = default_z_grid(radius=10.0, points=200)
    assert q.check_h2(q.canonical_generator(1.3), 2.6, zg).passed
    assert q.check_h2(q.entropic_generator(0.8), 0.8, zg).passed


def test_h2_cubic_fails():
    ell = 1.0
    cubic = q.custom_generator("r**3", ell=ell)
    zg = default_z_grid(radius=ell + 1.0, points=50)
    report = q.check_h2(cubic, ell, zg)
    assert not report.passed
    assert report.worst_growth_ratio > 1.0


def test_all_shipped_generators_pass_h2():
    zg = default_z_grid(radius=10.0, points=200)
    for gen in (q.canonical_generator(0.5), q.entropic_generator(2.0),
                q.lipschitz_dominator(1.0, [1.0], [0.5]), q.zero_generator()):
        ell = max(gen.ell, 1e-9)
        assert q.check_h2(gen, ell, zg).passed, gen.kind


def test_evenness_of_shipped_kinds():
    zg = default_z_grid(radius=5.0, points=101)
    for gen in (q.canonical_generator(1.0), q.entropic_generator(1.0),
                q.lipschitz_dominator(1.0, [1.0], [0.0])):
        assert np.allclose(gen(0.0, zg), gen(0.0, -zg))


def test_dominator_dominates_canonical():
    mu = 0.8
    can = q.canonical_generator(mu)
    zg = default_z_grid(radius=5.0, points=101)
    for z in zg[::10]:
        dom_z = q.lipschitz_dominator(mu, z, [0.0])
        assert dom_z(0.0, z) >= can(0.0, z) - 1e-12


def test_local_lipschitz_pass_and_trivial():
    can = q.canonical_generator(1.0)
    rng = np.random.default_rng(1)
    pairs = [(rng.uniform(-5, 5, 1), rng.uniform(-5, 5, 1)) for _ in range(200)]
    assert q.check_local_lipschitz(can, 2.0, pairs).passed
    assert q.check_local_lipschitz(can, 2.0, [([1.0], [1.0])]).passed


def test_local_lipschitz_detects_jump():
    jump = q.Generator(
        kind="custom", ell=1.0,
        eval=lambda t, z: np.where(np.linalg.norm(np.atleast_2d(z), axis=-1) > 1.0, 1.0, 0.0),
        params={},
    )
    pairs = [([1.0 - 5e-7], [1.0 + 5e-7])]
    assert not q.check_local_lipschitz(jump, 1.0, pairs).passed


def test_second_derivative_probe_flags_kink():
    # the kink sits at the origin itself; probing across it blows up
    zg = np.array([[0.0], [0.5], [1.0]])
    kinky = second_derivative_probe(q.canonical_generator(1.0), zg)
    smooth = second_derivative_probe(q.entropic_generator(1.0), np.array([[0.5], [1.0]]))
    assert kinky > 100.0
    assert smooth == pytest.approx(1.0, rel=1e-3)


def test_custom_expression_and_rejection():
    gen = q.custom_generator("0.5*r**2 + 0.1*sin(t)*r", ell=1.0)
    assert gen(0.0, [2.0]) == pytest.approx(2.0)
    assert gen(np.pi / 2, [1.0]) == pytest.approx(0.6)
    with pytest.raises(ValueError):
        q.custom_generator("__import__('os')", ell=1.0)
    with pytest.raises(ValueError):
        q.custom_generator("r.real", ell=1.0)


def test_generator_from_spec_round_trip():
    spec = {"kind": "entropic", "params": {"gamma": 0.5}}
    gen = generator_from_spec(spec)
    assert gen.kind == "entropic" and gen.ell == 0.5
    with pytest.raises(ValueError):
        generator_from_spec({"kind": "no-such-kind"})


def test_generator_pair_orders():
    pair = q.GeneratorPair(q.entropic_generator(0.5), q.entropic_generator(2.0))
    assert pair.verify(default_z_grid(radius=3.0, points=31))
    bad = q.GeneratorPair(q.entropic_generator(2.0), q.entropic_generator(0.5))
    assert not bad.verify(default_z_grid(radius=3.0, points=31))
