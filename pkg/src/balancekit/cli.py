"""Command-line interface.

Subcommands: ``weights``, ``balance``, ``estimate``, ``check-duality``,
``simulate``.  A JSON config file is authoritative; the shared flags
``--seed`` and ``--threads`` override individual keys.  Exit codes are a
stable contract: 0 success, 1 input or config error, 2 solver
non-convergence (artifacts still written), 3 verification failure.

Artifacts are JSON (plus plain-text renderings), written atomically, and
embed the resolved run configuration and toolkit version, so re-running a
command with the same config and seed reproduces them byte for byte.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import BasisSpec, ObservationTable, expand_basis, load_csv, standardize
from .duals import (
    DispersionSpec,
    PenaltySpec,
    SolverOptions,
    solve_dual,
    solve_minimax_l2,
    solve_primal_direct,
    verify_duality,
)
from .errors import BalancekitError, ConfigError, DataError
from .estimators import EstimandSpec, error_decomposition, estimate_effect
from .imbalance import full_sample_target, group_mask, imbalance_report, make_weights
from .kernels import KernelSpec, KernelWeightProblem, gram, resolve_bandwidth
from .simlab import (
    DGPSpec,
    convergence_experiment,
    coverage_experiment,
    generate,
    random_duality_instance,
)

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_NO_CONVERGENCE = 2
EXIT_VERIFICATION_FAILED = 3

DUALITY_PAIRS = (
    ("quadratic", "l1-scaled"),
    ("entropy", "l1-scaled"),
    ("quadratic-nonneg", "l1-scaled"),
)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e


def _resolved_config(cfg: dict, args) -> dict:
    out = json.loads(json.dumps(cfg))  # deep copy via JSON round-trip
    if args.seed is not None:
        out["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        out["threads"] = args.threads
    return out


def _provenance(cfg: dict) -> dict:
    return {"run_config": cfg, "version": __version__}


def _load_table(args, cfg) -> ObservationTable:
    if not args.data:
        raise ConfigError("--data is required for this command")
    schema = cfg.get("schema")
    if not schema:
        raise ConfigError("config needs a 'schema' block naming the treatment column")
    return load_csv(args.data, schema)


def _build_features(table, cfg):
    basis_cfg = dict(cfg.get("basis") or {"kind": "linear-with-intercept"})
    do_standardize = bool(basis_cfg.pop("standardize", False))
    fm = expand_basis(table, BasisSpec.from_dict(basis_cfg))
    if do_standardize:
        fm = standardize(fm)
    return fm


def _solver_options(scfg) -> SolverOptions:
    return SolverOptions(
        tolerance=float(scfg.get("tolerance", 1e-9)),
        max_iter=int(scfg.get("max_iter", 50_000)),
    )


def _solve_weights(table, fm, target, scfg, group):
    """Run the configured solver; returns (weights, solution, converged)."""
    method = scfg.get("method", "minimax-l2")
    if method == "minimax-l2":
        sol = solve_minimax_l2(fm, table.treatment, target, float(scfg.get("sigma2", 1.0)), group)
        return sol.weights, sol, sol.converged
    if method == "dual":
        chi = DispersionSpec(scfg.get("dispersion", "quadratic"))
        pen = PenaltySpec(scfg.get("penalty", "l1-scaled"), float(scfg.get("sigma2", 0.0)))
        sol = solve_dual(fm, table.treatment, target, chi, pen, _solver_options(scfg), group)
        return sol.weights, sol, sol.converged
    if method == "kernel":
        kspec = resolve_bandwidth(KernelSpec.from_dict(scfg.get("kernel") or {}), table.covariates)
        prob = KernelWeightProblem(
            gram=gram(kspec, table.covariates),
            treatment=table.treatment,
            sigma2=float(scfg.get("sigma2", 1.0)),
            constraints=scfg.get("constraints", "none"),
            group=group,
        )
        from .kernels import solve_kernel_minimax

        opts = _solver_options(scfg)
        sol = solve_kernel_minimax(prob, opts.tolerance, opts.max_iter)
        return sol.weights, sol, sol.converged
    raise ConfigError(f"unknown solver method {method!r}")


def _solution_record(sol) -> dict:
    if hasattr(sol, "to_dict"):
        return sol.to_dict()
    return {
        "weights": sol.weights.values.tolist(),
        "group": sol.weights.group,
        "objective": sol.objective,
        "objective_trace": sol.objective_trace.tolist(),
        "iterations": sol.iterations,
        "converged": sol.converged,
        "status": sol.status,
    }


def _weights_csv(weights) -> str:
    lines = ["unit,weight"]
    lines += [f"{i},{v!r}" for i, v in enumerate(weights.values.tolist())]
    return "\n".join(lines) + "\n"


def cmd_weights(args) -> int:
    cfg = _resolved_config(_load_config(args.config), args)
    table = _load_table(args, cfg)
    fm = _build_features(table, cfg)
    scfg = cfg.get("solver") or {}
    group = scfg.get("group", "treated")
    target = full_sample_target(fm)
    weights, sol, converged = _solve_weights(table, fm, target, scfg, group)
    report = imbalance_report(fm, table.treatment, weights, target, table)

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    record = dict(_provenance(cfg), solution=_solution_record(sol))
    _write_atomic(outdir / "weights.csv", _weights_csv(weights))
    _write_atomic(outdir / "solution.json", _dump(record))
    _write_atomic(outdir / "imbalance.json", _dump(dict(_provenance(cfg), report=report.to_dict())))
    _write_atomic(outdir / "imbalance.txt", report.to_text())
    if args.format == "text":
        sys.stdout.write(report.to_text())
    else:
        sys.stdout.write(_dump({"converged": converged, "max_l1ball": report.max_l1ball}))
    return EXIT_OK if converged else EXIT_NO_CONVERGENCE


def _read_weights_csv(path, n: int) -> np.ndarray:
    import csv as _csv

    vals = np.zeros(n)
    seen = 0
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = _csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"unit", "weight"}:
            raise DataError(f"{path}: expected header 'unit,weight'")
        for row in reader:
            i = int(row["unit"])
            if not 0 <= i < n:
                raise DataError(f"{path}: unit {i} out of range")
            vals[i] = float(row["weight"])
            seen += 1
    if seen != n:
        raise DataError(f"{path}: expected {n} rows, got {seen}")
    return vals


def cmd_balance(args) -> int:
    cfg = _resolved_config(_load_config(args.config), args)
    table = _load_table(args, cfg)
    fm = _build_features(table, cfg)
    group = (cfg.get("solver") or {}).get("group", "treated")
    if cfg.get("weights_csv"):
        vals = _read_weights_csv(cfg["weights_csv"], table.n)
        weights = make_weights(vals, table.treatment, group)
    else:
        gm = group_mask(table.treatment, group)
        weights = make_weights(
            np.where(gm, table.n / max(int(gm.sum()), 1), 0.0), table.treatment, group
        )
    target = full_sample_target(fm)
    report = imbalance_report(fm, table.treatment, weights, target, table)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_atomic(outdir / "imbalance.json", _dump(dict(_provenance(cfg), report=report.to_dict())))
    _write_atomic(outdir / "imbalance.txt", report.to_text())
    sys.stdout.write(report.to_text() if args.format == "text" else _dump({"max_l1ball": report.max_l1ball}))
    return EXIT_OK


def _estimand_spec(cfg, table) -> EstimandSpec:
    ecfg = dict(cfg.get("estimand") or {"kind": "ate"})
    kind = ecfg.get("kind", "ate")
    target_table = None
    if kind == "target-population-mean":
        path = ecfg.get("target_data")
        if not path:
            raise ConfigError("target-population-mean needs estimand.target_data")
        schema = dict(cfg.get("schema") or {})
        schema = {"treatment": schema.get("treatment"), "outcome": None,
                  "covariates": schema.get("covariates")}
        target_table = load_csv(path, schema)
    point = ecfg.get("point")
    return EstimandSpec(
        kind=kind,
        target_table=target_table,
        point=None if point is None else np.asarray(point, dtype=float),
        bandwidth=ecfg.get("bandwidth"),
        draws=int(ecfg.get("draws", 10_000)),
        seed=int(ecfg.get("seed", cfg.get("seed", 0))),
    )


def cmd_estimate(args) -> int:
    cfg = _resolved_config(_load_config(args.config), args)
    table = _load_table(args, cfg)
    if table.outcome is None:
        raise ConfigError("estimate needs an outcome column in the schema")
    fm = _build_features(table, cfg)
    scfg = cfg.get("solver") or {}
    ecfg = dict(cfg.get("estimand") or {})
    espec = _estimand_spec(cfg, table)
    if scfg.get("method") == "kernel" and espec.kind not in ("treated-mean", "control-mean", "ate"):
        raise ConfigError("kernel weights support full-sample targets only")

    non_converged = []

    def solver(fm_, treatment_, target_, group_):
        weights, _sol, conv = _solve_weights(table, fm_, target_, scfg, group_)
        if not conv:
            non_converged.append(group_)
        return weights

    effect = estimate_effect(
        table,
        fm,
        espec,
        solver,
        level=float(ecfg.get("level", 0.95)),
        n_folds=int(ecfg.get("folds", 5)),
        ridge_penalty=float(ecfg.get("ridge_penalty", 1e-3)),
        fold_seed=int(ecfg.get("fold_seed", cfg.get("seed", 0))),
        augment=bool(ecfg.get("augment", True)),
    )

    record = dict(_provenance(cfg), estimate=effect.to_dict())
    if ecfg.get("oracle_dgp"):
        record["error_decomposition"] = _oracle_decomposition(cfg, ecfg, table, fm, espec, scfg)

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_atomic(outdir / "estimate.json", _dump(record))
    _write_atomic(outdir / "report.txt", _effect_text(effect))
    sys.stdout.write(_effect_text(effect) if args.format == "text" else _dump(
        {"point": effect.point, "ci": effect.ci, "status": effect.status}
    ))
    return EXIT_NO_CONVERGENCE if non_converged else EXIT_OK


def _oracle_decomposition(cfg, ecfg, table, fm, espec, scfg):
    """Exact error split for simulated data whose generating process is known."""
    dgp = DGPSpec.from_dict(ecfg["oracle_dgp"])
    _probe, oracles = generate(dgp)
    group = "treated" if espec.kind in ("treated-mean", "ate") else "control"
    target = full_sample_target(fm)
    weights, _sol, _conv = _solve_weights(table, fm, target, scfg, group)
    from .estimators import fit_crossfit_ridge

    model = fit_crossfit_ridge(
        table, fm, int(ecfg.get("folds", 5)), float(ecfg.get("ridge_penalty", 1e-3)),
        group, int(ecfg.get("fold_seed", cfg.get("seed", 0))),
    )
    mean_fn = oracles.mean_treated if group == "treated" else oracles.mean_control
    truth = oracles.mu_treated if group == "treated" else oracles.mu_control
    parts = error_decomposition(table, weights, model, mean_fn, truth)
    return {
        "group": group,
        "imbalance_term": parts[0],
        "noise_term": parts[1],
        "sampling_term": parts[2],
        "total_error": parts[0] + parts[1] + parts[2],
    }


def _effect_text(effect) -> str:
    lines = [f"estimand : {effect.estimand}", f"point    : {effect.point:.6g}"]
    if effect.ci is not None:
        lines.append(f"{int(effect.level * 100)}% CI   : [{effect.ci[0]:.6g}, {effect.ci[1]:.6g}]")
    lines += [
        f"variance : {effect.variance:.6g}",
        f"weight rms: {effect.gamma_rms:.6g}",
        f"status   : {effect.status}",
    ]
    for label, diags in (("before", effect.diagnostics_before), ("after", effect.diagnostics_after)):
        for grp, rep in sorted(diags.items()):
            lines.append("")
            lines.append(f"--- balance {label} weighting ({grp}) ---")
            lines.append(rep.to_text().rstrip("\n"))
    return "\n".join(lines) + "\n"


def cmd_check_duality(args) -> int:
    cfg = _resolved_config(_load_config(args.config), args)
    dcfg = dict(cfg.get("duality_check") or {})
    instances = int(dcfg.get("instances", 100))
    tolerance = float(dcfg.get("tolerance", 1e-6))
    max_n = int(dcfg.get("max_n", 60))
    max_p = int(dcfg.get("max_p", 12))
    pairs = [tuple(p) for p in dcfg.get("pairs", [list(p) for p in DUALITY_PAIRS])]
    if instances < 1:
        raise ConfigError("duality_check.instances must be positive")
    rng = np.random.default_rng(int(cfg.get("seed", 0)))
    primal_opts = SolverOptions(tolerance=float(dcfg.get("primal_tolerance", 1e-8)), max_iter=50_000)

    rows = []
    worst = 0.0
    all_passed = True
    for kind, pen_kind in pairs:
        chi = DispersionSpec(kind)
        pen = PenaltySpec(pen_kind, float(dcfg.get("sigma2", 0.0)))
        for k in range(instances):
            inst = random_duality_instance(rng, max_n=max_n, max_p=max_p)
            dual = solve_dual(inst.fm, inst.treatment, inst.target, chi, pen)
            primal = solve_primal_direct(
                inst.fm, inst.treatment, inst.target, chi, pen, primal_opts
            )
            rep = verify_duality(
                inst.fm, inst.treatment, inst.target, chi, pen,
                primal.weights, dual, tolerance,
            )
            worst = max(worst, rep.max_discrepancy)
            all_passed = all_passed and rep.passed and dual.converged
            rows.append(
                {
                    "pair": f"{kind}/{pen_kind}",
                    "instance": k,
                    "discrepancy": rep.max_discrepancy,
                    "weight_discrepancy": rep.weight_discrepancy,
                    "objective_excess": rep.objective_excess,
                    "passed": rep.passed,
                }
            )

    record = dict(_provenance(cfg), max_discrepancy=worst, passed=all_passed, table=rows)
    if args.out:
        outdir = Path(args.out)
        outdir.mkdir(parents=True, exist_ok=True)
        _write_atomic(outdir / "duality.json", _dump(record))
        _write_atomic(outdir / "duality.txt", _duality_text(rows, worst, all_passed))
    sys.stdout.write(
        _duality_text(rows, worst, all_passed) if args.format == "text"
        else _dump({"max_discrepancy": worst, "passed": all_passed})
    )
    return EXIT_OK if all_passed else EXIT_VERIFICATION_FAILED


def _duality_text(rows, worst, passed) -> str:
    lines = [f"{'pair':24s} {'instance':>8s} {'discrepancy':>14s} {'passed':>7s}"]
    for r in rows:
        lines.append(
            f"{r['pair']:24s} {r['instance']:>8d} {r['discrepancy']:>14.3e} {str(r['passed']):>7s}"
        )
    lines.append(f"max discrepancy: {worst:.3e}  overall: {'pass' if passed else 'FAIL'}")
    return "\n".join(lines) + "\n"


def cmd_simulate(args) -> int:
    cfg = _resolved_config(_load_config(args.config), args)
    sim = dict(cfg.get("simulate") or {})
    if not sim:
        raise ConfigError("config needs a 'simulate' block")
    experiment = sim.get("experiment")
    dgp = DGPSpec.from_dict(sim.get("dgp") or {})
    replications = int(sim.get("replications", 0))
    if replications < 1:
        raise ConfigError("simulate.replications must be positive")
    threads = int(cfg.get("threads", 1) or 1)
    basis = BasisSpec.from_dict(sim.get("basis") or {"kind": "linear-with-intercept"})
    scfg = sim.get("solver") or {"method": "minimax-l2", "sigma2": 1.0}

    def solver(fm_, treatment_, target_, group_):
        if scfg.get("method", "minimax-l2") == "minimax-l2":
            return solve_minimax_l2(fm_, treatment_, target_, float(scfg.get("sigma2", 1.0)), group_).weights
        if scfg.get("method") == "dual":
            chi = DispersionSpec(scfg.get("dispersion", "quadratic"))
            pen = PenaltySpec(scfg.get("penalty", "l1-scaled"), float(scfg.get("sigma2", 0.0)))
            sol = solve_dual(fm_, treatment_, target_, chi, pen, _solver_options(scfg), group_)
            if not sol.converged:
                raise BalancekitError("solver did not converge")
            return sol.weights
        raise ConfigError("simulate supports minimax-l2 or dual solvers")

    seed = int(cfg.get("seed", 0))
    if experiment == "convergence":
        result = convergence_experiment(
            dgp, sim.get("ns", [200, 800, 3200]), solver,
            replications=replications, seed=seed, basis=basis,
            decrease_margin=float(sim.get("decrease_margin", 0.02)),
            threads=threads,
        )
    elif experiment == "coverage":
        result = coverage_experiment(
            dgp, solver, replications=replications,
            level=float(sim.get("level", 0.95)), seed=seed, basis=basis,
            estimand=sim.get("estimand", "treated-mean"),
            n_folds=int(sim.get("folds", 5)),
            ridge_penalty=float(sim.get("ridge_penalty", 1e-3)),
            threads=threads,
        )
    else:
        raise ConfigError("simulate.experiment must be 'convergence' or 'coverage'")

    record = dict(_provenance(cfg), result=result.to_dict())
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_atomic(outdir / "simresult.json", _dump(record))
    _write_atomic(outdir / "summary.txt", result.to_text())
    sys.stdout.write(result.to_text() if args.format == "text" else _dump(result.to_dict()))
    return EXIT_OK


def _add_shared(sub):
    sub.add_argument("--data", help="input CSV path")
    sub.add_argument("--config", required=True, help="JSON config path")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--seed", type=int, default=None, help="override config seed")
    sub.add_argument("--threads", type=int, default=None,
                     help="replication threads (default: config value or 1)")
    sub.add_argument("--format", choices=("json", "text"), default="json",
                     help="stdout rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="balancekit",
                                     description="balancing weights toolkit")
    parser.add_argument("--version", action="version", version=f"balancekit {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, fn, needs_out in (
        ("weights", cmd_weights, True),
        ("balance", cmd_balance, True),
        ("estimate", cmd_estimate, True),
        ("check-duality", cmd_check_duality, False),
        ("simulate", cmd_simulate, True),
    ):
        sub = subs.add_parser(name)
        _add_shared(sub)
        sub.set_defaults(fn=fn, needs_out=needs_out)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.needs_out and not args.out:
        print("error: --out is required for this command", file=sys.stderr)
        return EXIT_INPUT_ERROR
    try:
        return args.fn(args)
    except (BalancekitError, ConfigError, DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
