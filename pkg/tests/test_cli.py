import json

import yaml

from qfexp import cli

MINI = {
    "schema_version": 1,
    "seed": 424242,
    "grid": {"horizon": 1.0, "steps": 16},
    "ensemble": {"dim": 1, "paths": 1024},
    "basis": {"kind": "piecewise", "order": 20},
    "solve": {
        "generator": {"kind": "entropic", "params": {"gamma": 1.0}},
        "payoff": {"kind": "cos"},
        "oracle": "cole-hopf",
        "convergence_steps": [8, 16],
    },
    "acceptance": {"solve": {"max_rel_error": 0.05}},
}


def _write(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def test_solve_run_and_manifest(tmp_path):
    cfg = _write(tmp_path, MINI)
    out = tmp_path / "out"
    assert cli.run("solve", cfg, str(out)) == 0
    assert (out / "solution_summary.csv").exists()
    assert (out / "solve_result.csv").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    import hashlib
    for name, digest in manifest["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest


def test_determinism_byte_identical(tmp_path):
    cfg = _write(tmp_path, MINI)
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert cli.run("solve", cfg, str(out1)) == 0
    assert cli.run("solve", cfg, str(out2)) == 0
    for name in ("solution_summary.csv", "solve_result.csv", "solve_convergence.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_simulate_dump(tmp_path):
    cfg = dict(MINI)
    cfg["ensemble"] = {"dim": 1, "paths": 8}
    path = _write(tmp_path, cfg)
    out = tmp_path / "sim"
    assert cli.run("simulate", path, str(out)) == 0
    lines = (out / "paths.csv").read_text().splitlines()
    assert len(lines) == 8 * 17 + 1
    assert lines[0] == "m,i,t,B0"


def test_unknown_generator_kind_exits_2(tmp_path):
    cfg = json.loads(json.dumps(MINI))
    cfg["solve"]["generator"]["kind"] = "no-such-generator"
    path = _write(tmp_path, cfg)
    assert cli.run("solve", path, str(tmp_path / "x")) == 2


def test_missing_seed_exits_2(tmp_path):
    cfg = {k: v for k, v in MINI.items() if k != "seed"}
    assert cli.run("solve", _write(tmp_path, cfg), str(tmp_path / "x")) == 2


def test_failed_assertion_exits_1(tmp_path):
    cfg = json.loads(json.dumps(MINI))
    cfg["acceptance"]["solve"]["max_rel_error"] = 1e-9
    assert cli.run("solve", _write(tmp_path, cfg), str(tmp_path / "x")) == 1


def _axioms_cfg(operators, acceptance):
    return {
        "schema_version": 1,
        "seed": 7,
        "grid": {"horizon": 1.0, "steps": 16},
        "ensemble": {"dim": 1, "paths": 2048},
        "basis": {"kind": "polynomial", "order": 3},
        "axioms": {"operators": operators},
        "acceptance": {"axioms": acceptance},
    }


def test_planted_fault_config_exits_1(tmp_path):
    # the fault is listed as an honest operator: the gate must trip
    fault = {"kind": "fault-bias", "bias": 0.1, "base": {"kind": "linear"}}
    cfg = _axioms_cfg([fault], {"honest_all_pass": True})
    assert cli.run("axioms", _write(tmp_path, cfg, "bad.yaml"), str(tmp_path / "bad")) == 1


def test_expected_fault_detection_exits_0(tmp_path):
    ops = [
        {"kind": "linear"},
        {"kind": "fault-bias", "bias": 0.1, "expect_fault": True, "base": {"kind": "linear"}},
    ]
    cfg = _axioms_cfg(ops, {"honest_all_pass": True, "fault_a2_fails": True})
    assert cli.run("axioms", _write(tmp_path, cfg, "ok.yaml"), str(tmp_path / "ok")) == 0


def test_undetected_fault_requirement_exits_1(tmp_path):
    # fault_a2_fails demanded but no fault present
    cfg = _axioms_cfg([{"kind": "linear"}], {"fault_a2_fails": True})
    assert cli.run("axioms", _write(tmp_path, cfg, "none.yaml"), str(tmp_path / "none")) == 1


def test_override_and_round_trip(tmp_path):
    cfg = cli.load_config(_write(tmp_path, MINI))
    cli.apply_overrides(cfg, ["ensemble.paths=2048", "basis.order=10"])
    assert cfg["ensemble"]["paths"] == 2048
    assert cfg["basis"]["order"] == 10
    # serialize(parse(.)) is idempotent
    dumped = yaml.safe_dump(cfg)
    again = yaml.safe_load(dumped)
    assert cli.canonical_dumps(cfg) == cli.canonical_dumps(again)


def test_emit_plots(tmp_path):
    cfg = _write(tmp_path, MINI)
    out = tmp_path / "plots"
    assert cli.run("solve", cfg, str(out)) == 0
    made = cli.emit_plots(out)
    assert any(p.name == "y0_vs_steps.png" for p in made)
    twice = cli.emit_plots(out)
    for a, b in zip(sorted(made), sorted(twice)):
        assert a.read_bytes() == b.read_bytes()


def test_emit_plots_empty_csv_warns(tmp_path, capsys):
    out = tmp_path / "empty"
    out.mkdir()
    (out / "solve_convergence.csv").write_text("")
    assert cli.emit_plots(out) == []
    assert "empty" in capsys.readouterr().err


def test_cli_main_flags(tmp_path):
    cfg = _write(tmp_path, MINI)
    code = cli.main(["solve", "--config", cfg, "--out", str(tmp_path / "m"),
                     "--override", "ensemble.paths=512"])
    assert code == 0
