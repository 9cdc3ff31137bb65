"""
Experiment runner: config parsing, seeded pipelines, CSV emission, plots.

Subcommands map one-to-one onto module surfaces:

    simulate    dump the Brownian ensemble
    solve       backward solve + oracle comparison + grid-refinement table
    axioms      property battery over configured operators
    domination  stability checks and the self-domination gap demo
    decompose   penalization table for the canonical test process
    recover     driver recovery surface and the one-parameter fit
    all         every block present in the config

Exit codes: 0 success, 1 hard assertion failed, 2 config/IO error,
3 numerical non-convergence. Runs are reproducible: the seed is mandatory,
CSV floats are written with repr (shortest round-trip), and the manifest
records content hashes of every emitted file.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .axioms import run_axiom_battery, summarize_reports, write_reports_csv
from .bmo import (
    DominationConstants, check_linf_domination, check_lp_domination,
    check_one_sided_domination, domination_failure_demo,
)
from .bsde import BasisInadequacyError, DivergenceError, TerminalCondition, cole_hopf_oracle, solve_bsde
from .decomposition import NonConvergenceError, doob_meyer_decompose
from .generators import generator_from_spec
from .operators import GExpectation, operator_from_spec
from .regression import RegressionBasis
from .representation import (
    canonical_process, check_recovered_lipschitz, default_recovery_z_grid,
    fit_canonical_mu, recover_generator,
)
from .stochastic import ensemble_rows, make_grid, simulate_brownian

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class AssertionFailure(RuntimeError):
    pass


# ----------------------------------------------------------------- config --

def load_config(path: str | Path) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
    if "seed" not in cfg:
        raise ConfigError("seed is mandatory (no wall-clock default)")
    return cfg


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return cfg


def canonical_dumps(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, default=str)


def basis_from_spec(spec: dict | None) -> RegressionBasis:
    spec = spec or {}
    return RegressionBasis(kind=spec.get("kind", "polynomial"), order=int(spec.get("order", 3)))


def build_context(cfg: dict):
    g = cfg.get("grid", {})
    e = cfg.get("ensemble", {})
    grid = make_grid(float(g.get("horizon", 1.0)), int(g.get("steps", 50)))
    ensemble = simulate_brownian(grid, int(e.get("dim", 1)), int(e.get("paths", 4096)), int(cfg["seed"]))
    basis = basis_from_spec(cfg.get("basis"))
    return grid, ensemble, basis


def payoff_values(spec: dict, ensemble) -> tuple[np.ndarray, float | None]:
    kind = spec.get("kind", "cos")
    N = ensemble.grid.steps
    b_T = ensemble.values[N, :, 0]
    if kind == "cos":
        return np.cos(b_T), 1.0
    if kind == "tanh":
        return np.tanh(b_T), 1.0
    if kind == "sin":
        return np.sin(b_T), 1.0
    if kind == "abs-capped":
        cap = float(spec.get("cap", 2.0))
        return np.minimum(np.abs(b_T), cap), cap
    if kind == "constant":
        c = float(spec.get("value", 0.0))
        return np.full(ensemble.n_paths, c), max(abs(c), 1.0)
    if kind == "gated-tanh":
        gate = ensemble.values[N // 2, :, 0] > 0
        return gate * np.tanh(b_T), 1.0
    raise ConfigError(f"unknown payoff kind {kind!r}")


# ------------------------------------------------------------ CSV helpers --

def write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _r(x) -> str:
    return repr(float(x))


# ------------------------------------------------------------ subcommands --

def run_simulate(cfg: dict, ctx, outdir: Path) -> list[Path]:
    grid, ensemble, _ = ctx
    rows = [
        {"m": m, "i": i, "t": _r(t), **{f"B{k}": _r(v) for k, v in enumerate(vals)}}
        for (m, i, t, *vals) in ensemble_rows(ensemble)
    ]
    path = outdir / "paths.csv"
    write_csv(path, rows)
    return [path]


def run_solve(cfg: dict, ctx, outdir: Path) -> list[Path]:
    grid, ensemble, basis = ctx
    block = cfg["solve"]
    gen = generator_from_spec(block["generator"])
    values, bound = payoff_values(block.get("payoff", {}), ensemble)
    terminal = TerminalCondition.bounded(values, bound, grid.steps)
    allow = bool(block.get("allow_unchecked_generator", False))
    sol = solve_bsde(terminal, gen, ensemble, basis, allow_unchecked_generator=allow)

    files = []
    rows = []
    for i in range(grid.steps + 1):
        absz = float(np.linalg.norm(sol.Z[i], axis=1).mean()) if i < grid.steps else 0.0
        rows.append({
            "i": i, "t": _r(grid.points[i]),
            "mean_Y": _r(sol.Y[i].mean()), "std_Y": _r(sol.Y[i].std()),
            "mean_absZ": _r(absz),
            "residual": _r(sol.residual[i] if i < grid.steps else 0.0),
        })
    summary = outdir / "solution_summary.csv"
    write_csv(summary, rows)
    files.append(summary)

    if block.get("dump_paths"):
        prows = []
        for i in range(grid.steps + 1):
            for m in range(ensemble.n_paths):
                prows.append({"i": i, "m": m, "Y": _r(sol.Y[i, m])})
        p = outdir / "solution_paths.csv"
        write_csv(p, prows)
        files.append(p)

    result_row = {"y0_solver": _r(sol.y0)}
    if block.get("oracle") == "cole-hopf":
        gamma = float(block["generator"]["params"]["gamma"])
        oracle = cole_hopf_oracle(gamma, terminal, ensemble, basis)
        rel = abs(sol.y0 - oracle[0, 0]) / abs(oracle[0, 0])
        result_row.update({"y0_oracle": _r(oracle[0, 0]), "rel_error": _r(rel)})
        limit = cfg.get("acceptance", {}).get("solve", {}).get("max_rel_error")
        if limit is not None and rel > float(limit):
            raise AssertionFailure(f"solver/oracle relative error {rel:.4%} > {limit:.2%}")
    res = outdir / "solve_result.csv"
    write_csv(res, [result_row])
    files.append(res)

    steps_list = block.get("convergence_steps")
    if steps_list:
        crow = []
        for n in steps_list:
            g2 = make_grid(grid.horizon, int(n))
            e2 = simulate_brownian(g2, ensemble.dim, ensemble.n_paths, cfg["seed"])
            v2, b2 = payoff_values(block.get("payoff", {}), e2)
            s2 = solve_bsde(TerminalCondition.bounded(v2, b2, g2.steps), gen, e2, basis,
                            allow_unchecked_generator=allow)
            crow.append({"steps": int(n), "y0": _r(s2.y0)})
        p = outdir / "solve_convergence.csv"
        write_csv(p, crow)
        files.append(p)
    return files


def run_axioms(cfg: dict, ctx, outdir: Path) -> list[Path]:
    grid, ensemble, basis = ctx
    block = cfg["axioms"]
    reports = []
    fault_reports = []
    for spec in block["operators"]:
        op = operator_from_spec({k: v for k, v in spec.items() if k != "expect_fault"},
                                ensemble, basis)
        batch = run_axiom_battery(op)
        (fault_reports if spec.get("expect_fault") else reports).extend(batch)
    print(summarize_reports(reports + fault_reports))
    path = outdir / "axiom_reports.csv"
    write_reports_csv(reports + fault_reports, path)

    acc = cfg.get("acceptance", {}).get("axioms", {})
    if acc.get("honest_all_pass") and not all(r.passed for r in reports):
        bad = [r.check for r in reports if not r.passed]
        raise AssertionFailure(f"honest operators failed checks: {bad}")
    if acc.get("fault_a2_fails"):
        a2 = [r for r in fault_reports if r.check == "constant-preserving"]
        if not a2 or any(r.passed for r in a2):
            raise AssertionFailure("planted constant bias was not detected")
    return [path]


def run_domination(cfg: dict, ctx, outdir: Path) -> list[Path]:
    grid, ensemble, basis = ctx
    block = cfg["domination"]
    kinds = block.get("kinds", ["lp", "linf", "onesided", "demo"])
    K = float(block.get("K", 1.0))
    R = float(block.get("R", 1.0))
    gen = generator_from_spec(block.get("generator", {"kind": "entropic", "params": {"gamma": 1.0}}))
    op = GExpectation(generator=gen, ensemble=ensemble, basis=basis)
    N = grid.steps
    b_T = ensemble.values[N, :, 0]
    z = np.atleast_1d(block.get("z", 1.0))
    from .stochastic import deterministic_stopping_time, first_hitting_time

    tau_T = deterministic_stopping_time(ensemble, N)
    rows = []
    failed = []
    for kind in kinds:
        if kind == "lp":
            consts = DominationConstants.from_bounds(K, R, gen.ell, J=float(block.get("J_lp", 0.019087)))
            rep = check_lp_domination(
                op, np.tanh(b_T), np.zeros(ensemble.n_paths),
                tau_T, first_hitting_time(ensemble, 0, float(block.get("hit_level", 1.0))),
                z, consts,
            )
        elif kind == "linf":
            rep = check_linf_domination(op, np.tanh(b_T), np.zeros(ensemble.n_paths), tau_T, z)
        elif kind == "onesided":
            alpha = gen.params.get("gamma", gen.ell) / 2.0
            consts = DominationConstants.from_bounds(K + 0.5, R, gen.ell,
                                                     J=float(block.get("J_onesided", 5.0)), alpha=alpha)
            rep = check_one_sided_domination(
                op, np.tanh(b_T), 0.5 * np.tanh(b_T), z, tau_T, consts,
            )
        elif kind == "demo":
            demo = domination_failure_demo(float(block.get("a", 1.0)), float(block.get("b", 1.0)), ensemble)
            rows.append({"kind": "demo", "passed": int(demo["significant"]),
                         "violation": _r(demo["gap"]), "lhs": _r(demo["gap"]),
                         "rhs": _r(3 * demo["se"]), "tolerance": _r(demo["se"]),
                         "notes": "positive gap expected"})
            if not demo["significant"]:
                failed.append("demo")
            continue
        else:
            raise ConfigError(f"unknown domination kind {kind!r}")
        rows.append(rep.row())
        if not rep.passed:
            failed.append(kind)
    path = outdir / "domination_report.csv"
    write_csv(path, rows)
    if cfg.get("acceptance", {}).get("domination", {}).get("all_pass") and failed:
        raise AssertionFailure(f"domination checks failed: {failed}")
    return [path]


def run_decompose(cfg: dict, ctx, outdir: Path) -> list[Path]:
    grid, ensemble, basis = ctx
    block = cfg["decompose"]
    gen = generator_from_spec(block.get("generator", {"kind": "entropic", "params": {"gamma": 1.0}}))
    op = GExpectation(generator=gen, ensemble=ensemble, basis=basis)
    z = np.atleast_1d(block.get("z", 1.0))
    ell = float(block.get("ell", gen.ell))
    schedule = tuple(block.get("schedule", (1, 2, 4, 8, 16, 32, 64)))
    proc = canonical_process(z, ell, ensemble)
    result = doob_meyer_decompose(proc.drift, z, op, schedule=schedule)
    rows = list(result.run_table())
    path = outdir / "decompose_table.csv"
    write_csv(path, rows)

    acc = cfg.get("acceptance", {}).get("decompose", {})
    if acc:
        r = float(np.linalg.norm(z))
        rate = float(gen(0.0, z)) + ell * (r + r * r)
        target = rate * grid.points
        sup_err = float(np.abs(result.A.mean(axis=1) - target).max())
        limit = float(acc.get("max_sup_error_fraction", 0.05)) * rate * grid.horizon
        if sup_err > limit:
            raise AssertionFailure(f"compensator sup error {sup_err:.4g} > {limit:.4g}")
        bound = 2.0 * ell * (r + r * r) * grid.horizon
        for run in result.runs:
            if float(run.A[-1].max()) > bound + 1e-6 + 0.01 * bound:
                raise AssertionFailure(f"A_T at n={run.n} exceeded twice the drift budget")
    return [path]


def run_recover(cfg: dict, ctx, outdir: Path) -> list[Path]:
    grid, ensemble, basis = ctx
    block = cfg["recover"]
    op = operator_from_spec(block["op"], ensemble, basis)
    zspec = block.get("zgrid", {})
    z_values = default_recovery_z_grid(
        ensemble.dim, float(zspec.get("lo", -3.0)), float(zspec.get("hi", 3.0)), int(zspec.get("count", 9))
    )
    t_values = block.get("tprobes", [0.0, grid.horizon / 4, grid.horizon / 2, 0.7 * grid.horizon])
    recovered = recover_generator(op, t_values, z_values, h_schedule=block.get("h_schedule"))
    surf = outdir / "recover_surface.csv"
    write_csv(surf, list(recovered.surface_rows()))
    fit = fit_canonical_mu(recovered)
    lip = check_recovered_lipschitz(recovered, ell_hat=2.0 * max(fit.mu_hat, 1e-9))
    fitp = outdir / "mufit_summary.csv"
    write_csv(fitp, [{
        "mu_hat": _r(fit.mu_hat), "residual_rms": _r(fit.residual_rms),
        "se": _r(fit.se), "model_mismatch": int(fit.model_mismatch),
        "lipschitz_pass": int(lip["passed"]), "message": fit.message,
    }])
    acc = cfg.get("acceptance", {}).get("recover", {})
    if acc.get("mu_range"):
        lo, hi = acc["mu_range"]
        if not (float(lo) <= fit.mu_hat <= float(hi)):
            raise AssertionFailure(f"mu_hat {fit.mu_hat} outside [{lo}, {hi}]")
    return [surf, fitp]


SUBCOMMANDS = {
    "simulate": run_simulate,
    "solve": run_solve,
    "axioms": run_axioms,
    "domination": run_domination,
    "decompose": run_decompose,
    "recover": run_recover,
}


# ------------------------------------------------------------------ plots --

def emit_plots(outdir: Path) -> list[Path]:
    """Static convergence/surface plots from the CSVs present in outdir."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    made = []

    def _load(path: Path):
        if not path.exists():
            return None
        text = path.read_text().strip()
        if not text:
            print(f"warning: {path.name} is empty, skipping plot", file=sys.stderr)
            return None
        with open(path) as fh:
            return list(csv.DictReader(fh))

    spec = [
        ("solve_convergence.csv", "steps", "y0", "y0_vs_steps.png", "backward steps", "Y0"),
        ("decompose_table.csv", "n", "mean_A_T", "an_vs_n.png", "penalty level n", "mean A_T"),
        ("recover_surface.csv", "z0", "ghat", "ghat_surface.png", "z", "recovered g"),
    ]
    for fname, xcol, ycol, out, xlabel, ylabel in spec:
        rows = _load(outdir / fname)
        if rows is None:
            continue
        if xcol not in rows[0] or ycol not in rows[0]:
            raise ConfigError(f"{fname} lacks columns {xcol}/{ycol}")
        xs = np.array([float(r[xcol]) for r in rows])
        ys = np.array([float(r[ycol]) for r in rows])
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(xs, ys, marker="o", ms=3, lw=1)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        fig.tight_layout()
        target = outdir / out
        fig.savefig(target, dpi=110, metadata={"Software": None})
        plt.close(fig)
        made.append(target)
    return made


# -------------------------------------------------------------------- run --

def run(subcommand: str, config_path: str, out_dir: str, overrides=(), threads: int | None = None) -> int:
    started = time.time()
    try:
        cfg = apply_overrides(load_config(config_path), list(overrides))
        outdir = Path(out_dir)
        outdir.mkdir(parents=True, exist_ok=True)
        ctx = build_context(cfg)
    except (ConfigError, OSError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    names = list(SUBCOMMANDS) if subcommand == "all" else [subcommand]
    files: list[Path] = []
    try:
        for name in names:
            if name != "simulate" and name not in cfg:
                if subcommand == "all":
                    continue
                raise ConfigError(f"config has no {name!r} block")
            if name == "simulate" and subcommand == "all" and "simulate" not in cfg:
                continue
            files.extend(SUBCOMMANDS[name](cfg, ctx, outdir))
        if cfg.get("plots"):
            files.extend(emit_plots(outdir))
    except AssertionFailure as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return 1
    except (NonConvergenceError, DivergenceError, BasisInadequacyError) as exc:
        print(f"numerical non-convergence: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, KeyError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    manifest = {
        "config_hash": hashlib.sha256(canonical_dumps(cfg).encode()).hexdigest(),
        "version": __version__,
        "started": started,
        "finished": time.time(),
        "threads": threads or 1,
        "files": {
            f.name: hashlib.sha256(f.read_bytes()).hexdigest() for f in files
        },
    }
    (Path(out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qfexp", description=__doc__)
    parser.add_argument("subcommand", choices=[*SUBCOMMANDS, "all"])
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default="out")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VAL")
    # domination shorthands
    parser.add_argument("--kind", choices=["lp", "linf", "onesided", "demo"])
    parser.add_argument("--K", type=float)
    parser.add_argument("--R", type=float)
    # recover shorthands
    parser.add_argument("--op", help="linear | canonical:MU | entropic:GAMMA | external:CMD")
    parser.add_argument("--zgrid", help="LO,HI,COUNT")
    parser.add_argument("--tprobes", help="comma-separated probe times")
    args = parser.parse_args(argv)

    overrides = list(args.override)
    if args.kind:
        overrides.append(f"domination.kinds=[{args.kind}]")
    if args.K is not None:
        overrides.append(f"domination.K={args.K}")
    if args.R is not None:
        overrides.append(f"domination.R={args.R}")
    if args.op:
        kind, _, param = args.op.partition(":")
        if kind == "linear":
            overrides.append("recover.op={kind: linear}")
        elif kind == "canonical":
            overrides.append(
                f"recover.op={{kind: gexp, generator: {{kind: canonical, params: {{mu: {param}}}}}}}")
        elif kind == "entropic":
            overrides.append(
                f"recover.op={{kind: gexp, generator: {{kind: entropic, params: {{gamma: {param}}}}}}}")
        elif kind == "external":
            overrides.append(f"recover.op={{kind: external, command: [{param}]}}")
        else:
            print(f"unknown --op {args.op!r}", file=sys.stderr)
            return 2
    if args.zgrid:
        lo, hi, count = args.zgrid.split(",")
        overrides.append(f"recover.zgrid={{lo: {lo}, hi: {hi}, count: {count}}}")
    if args.tprobes:
        overrides.append(f"recover.tprobes=[{args.tprobes}]")
    return run(args.subcommand, args.config, args.out, overrides, args.threads)


if __name__ == "__main__":
    sys.exit(main())
