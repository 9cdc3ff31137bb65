import sys
import textwrap

import numpy as np
import pytest

import qfexp as q
from qfexp.axioms import check_measurability


def test_evaluate_at_maturity_returns_payoff(entropic_op):
    ens = entropic_op.ensemble
    N = ens.grid.steps
    values = np.tanh(ens.values[-1, :, 0])
    xi = q.TerminalCondition.bounded(values, 1.0, N)
    assert np.array_equal(entropic_op.evaluate(xi, N), values)

    xi2 = q.TerminalCondition.with_affine(values, [0.5], N, N, bound=1.0)
    assert np.array_equal(entropic_op.evaluate(xi2, N), xi2.total_values(ens))


def test_frozen_matches_live_on_own_ensemble(entropic_op):
    ens = entropic_op.ensemble
    xi = q.TerminalCondition.bounded(np.cos(ens.values[-1, :, 0]), 1.0, ens.grid.steps)
    i = ens.grid.steps // 2
    live = entropic_op.evaluate(xi, i)
    frozen = entropic_op.evaluate_frozen(xi, i, ens)
    assert np.allclose(live, frozen, atol=1e-12)


def test_measurability_probe_exact_zero(entropic_op, linear_op):
    ens = entropic_op.ensemble
    xi = q.TerminalCondition.bounded(np.cos(ens.values[-1, :, 0]), 1.0, ens.grid.steps)
    for op in (entropic_op, linear_op):
        report = check_measurability(op, xi, ens.grid.steps // 2)
        assert report.passed and report.violation == 0.0


def test_measurability_probe_with_affine_payoff(entropic_op):
    ens = entropic_op.ensemble
    N = ens.grid.steps
    tau = q.first_hitting_time(ens, 0, 1.0)
    xi = q.TerminalCondition.with_affine(
        np.tanh(ens.values[-1, :, 0]), [1.0], tau, N, bound=1.0)
    report = check_measurability(entropic_op, xi, N // 2)
    assert report.passed and report.violation == 0.0


def test_affine_formula_operator_paths(ens_small):
    gen = q.canonical_generator(1.0)
    op = q.AffineFormulaExpectation(generator=gen, ensemble=ens_small)
    N = ens_small.grid.steps
    xi = q.TerminalCondition.with_affine(np.zeros(ens_small.n_paths), [1.0], N, N, bound=None)
    vals = op.evaluate_path(xi)
    # value at t: z B_t + (T - t) g(z)
    want = ens_small.values[:, :, 0] + (1.0 - ens_small.grid.points)[:, None] * 2.0
    assert np.allclose(vals, want, atol=1e-12)
    with pytest.raises(ValueError):
        op.evaluate_path(q.TerminalCondition.bounded(
            np.tanh(ens_small.values[-1, :, 0]), 1.0, N))


def test_fault_operators(entropic_op):
    ens = entropic_op.ensemble
    xi = q.TerminalCondition.constant(1.0, ens)
    biased = q.ConstantBiasOperator(entropic_op, 0.1)
    assert np.allclose(biased.evaluate(xi, 8), 1.1)
    gained = q.StateGainOperator(entropic_op, 0.1)
    out = gained.evaluate(xi, 8)
    pos = ens.values[8, :, 0] > 0
    assert np.allclose(out[pos], 1.1) and np.allclose(out[~pos], 1.0)


def test_operator_from_spec(ens_small, poly3):
    from qfexp.operators import operator_from_spec

    op = operator_from_spec(
        {"kind": "gexp", "generator": {"kind": "entropic", "params": {"gamma": 1.0}}},
        ens_small, poly3)
    assert op.generator.kind == "entropic"
    fault = operator_from_spec(
        {"kind": "fault-bias", "bias": 0.2, "base": {"kind": "linear"}}, ens_small, poly3)
    assert fault.bias == 0.2
    with pytest.raises(ValueError):
        operator_from_spec({"kind": "nope"}, ens_small, poly3)


CHILD = textwrap.dedent("""
    import json, sys
    import numpy as np

    req = json.load(sys.stdin)
    data = np.load(req["ensemble_file"])
    values = data["values"]
    i = req["step"]
    payoff = np.asarray(req["payoff"]["values"])
    if i >= req["payoff"]["maturity"]:
        out = payoff
    elif i == 0:
        out = np.full(len(payoff), payoff.mean())
    else:
        x = values[i, :, 0]
        X = np.column_stack([x**p for p in range(4)])
        beta, *_ = np.linalg.lstsq(X, payoff, rcond=None)
        out = X @ beta
    json.dump(out.tolist(), sys.stdout)
""")


def test_external_operator_protocol(tmp_path, ens_small, poly3):
    child = tmp_path / "linear_child.py"
    child.write_text(CHILD)
    op = q.ExternalOperator([sys.executable, str(child)], ens_small, poly3)
    N = ens_small.grid.steps
    values = np.tanh(ens_small.values[-1, :, 0])
    xi = q.TerminalCondition.bounded(values, 1.0, N)

    lin = q.LinearExpectation(ens_small, poly3)
    # the chain equals a single projection at the last interior step and at 0
    for i in (N - 1, 0):
        got = op.evaluate(xi, i)
        want = lin.evaluate(xi, i)
        assert np.allclose(got, want, atol=1e-9)
    assert np.array_equal(op.evaluate(xi, N), values)
