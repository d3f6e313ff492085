"""Command line: ``oldnash {verify|nash|leader|sweep} --config PATH [--out DIR] [--seed N]``.

Outputs go to ``DIR/report.json``, ``DIR/tables/*.csv`` and
``DIR/fields/*.oldn``.  Reports contain no timings or paths, so a fixed
configuration and seed give byte-identical files.  Errors print a JSON
object on stdout and exit with the error's code; failed checks exit with 3.
"""

import argparse
import csv
import io
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import write_checkpoint
from .config import load_config
from .diagnostics import (adjoint_identity_check, appendix_smallness_check, energy_monitor,
                          fubini_check, memory_free_match, memory_scheme_order)
from .errors import OldnashError
from .geometry import inner_product_H, leray_project, norm_H
from .leader import (check_variational_inequality, controllability_sweep, gramian_apply,
                     minimize_dual, sweep_checks, sweep_csv)
from .nash import (beta0_estimate, cost_J_i, solve_nash, solve_nash_tracking,
                   solve_nash_via_optimality_system, tracking_cost)
from .scenario import build_scenario, random_leader_control
from .solvers import ControlSet, control_inner, control_norm, solve_follower_adjoint

CHECKS_FAILED = 3
COMMANDS = ("verify", "nash", "leader", "sweep")


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to ``None``."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps(obj):
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _check(name, ok, value, tol, **extra):
    return {"name": name, "ok": bool(ok), "value": value, "tol": tol, **extra}


# -- subcommands -------------------------------------------------------------------

def run_verify(sc):
    cfg, model, grid, cost = sc.config, sc.model, sc.grid, sc.cost
    trials = cfg.trials
    checks = []

    ident = adjoint_identity_check(model, cost, sc.leader_mask, n_trials=trials, seed=sc.seed("identity"))
    checks.append(_check("adjoint_identity", ident.ok, ident.max_residual, 1e-9, trials=trials))

    fub = fubini_check(grid, model.params, n_trials=trials, seed=sc.seed("fubini"))
    checks.append(_check("fubini", fub <= 1e-10, fub, 1e-10))

    rng = np.random.default_rng(sc.seed("energy"))
    terminal = leray_project(grid, rng.standard_normal(grid.n_faces))
    energy = energy_monitor(model, solve_follower_adjoint(model, terminal))
    checks.append(_check("energy_bound", energy.bound_ok, energy.bound_ratio, 1.0))
    checks.append(_check("energy_balance", energy.balance_ok, energy.max_residual, energy.residual_tol))

    small = appendix_smallness_check(model, cost, f="random", seed=sc.seed("smallness"))
    checks.append(_check("smallness_bound", small.bound_ok, small.measured, small.bound,
                         beta=small.beta, c0=small.c0, c_tilde=small.c_tilde, c1=small.c1,
                         printed_bound=small.printed_bound, printed_ok=small.printed_ok))

    v = random_leader_control(grid, sc.leader_mask, sc.seed("nash"))
    nash = solve_nash(model, v, cost, seed=sc.seed("nash"))
    other = solve_nash_via_optimality_system(model, v, cost)
    wn = control_norm(grid, nash.w)
    route = control_norm(grid, other.w - nash.w) / wn if wn > 0 else control_norm(grid, other.w)
    el = max(nash.el_residuals) if nash.el_residuals else 0.0
    checks.append(_check("nash_euler_lagrange", el <= 1e-8, el, 1e-8))
    checks.append(_check("nash_inequality", nash.nash_min_increase >= 0, nash.nash_min_increase, 0.0))
    checks.append(_check("nash_route_agreement", route <= 1e-6, route, 1e-6))

    beta = beta0_estimate(model, cost, n_samples=5 * trials, seed=sc.seed("coercivity"))
    need = 1.0 - beta.beta0 - 1e-8
    checks.append(_check("coercivity", beta.coercivity_min >= need, beta.coercivity_min, need,
                         beta0=beta.beta0, operator_norm=beta.operator_norm))

    rng = np.random.default_rng(sc.seed("gramian"))
    f1, f2 = leray_project(grid, rng.standard_normal((2, grid.n_faces)))
    problem = sc.leader_problem()
    g1, v1 = gramian_apply(problem, f1, return_control=True)
    g2 = gramian_apply(problem, f2)
    a, b = float(inner_product_H(grid, g1, f2)), float(inner_product_H(grid, f1, g2))
    sym = abs(a - b) / max(abs(a), abs(b))
    checks.append(_check("gramian_symmetry", sym <= 1e-9, sym, 1e-9))
    q1, q2 = float(inner_product_H(grid, g1, f1)), control_inner(grid, v1, v1)
    energy_id = abs(q1 - q2) / max(abs(q1), abs(q2))
    checks.append(_check("gramian_energy", energy_id <= 1e-10, energy_id, 1e-10))

    diffs, orders = memory_scheme_order(cfg.grid, model.params, seed=sc.seed("memory"))
    checks.append(_check("memory_order", all(1.8 <= o <= 2.2 for o in orders), orders, [1.8, 2.2],
                         differences=diffs))
    free = memory_free_match(model, seed=sc.seed("memory"))
    checks.append(_check("memory_free_limit", free <= 1e-10, free, 1e-10))

    leader = {}
    if ident.ok:
        sol = minimize_dual(problem)
        vi, scale, _ = check_variational_inequality(sol, problem, cfg.vi_samples, seed=sc.seed("vi"))
        gap_tol = 1e-4 * max(sol.leader_cost, 1.0)
        checks.append(_check("leader_feasible", sol.feasible, sol.distance,
                             problem.epsilon * (1 + problem.tol_accept)))
        checks.append(_check("duality_gap", abs(sol.gap) <= gap_tol, sol.gap, gap_tol))
        checks.append(_check("variational_inequality", vi >= -1e-6 * scale, vi, -1e-6 * scale))
        leader = _leader_summary(sol, problem)
    else:
        checks.append(_check("leader", False, None, None, skipped="adjoint identity failed"))
    ok = all(c["ok"] for c in checks)
    report = {"command": "verify", "ok": ok, "checks": checks, "leader": leader}
    table = _table(["name", "ok", "value", "tol"],
                   [[c["name"], c["ok"], c["value"], c["tol"]] for c in checks])
    return (0 if ok else CHECKS_FAILED), report, {"checks.csv": table}, {}


def _leader_summary(sol, problem):
    return {"epsilon": problem.epsilon, "distance": sol.distance, "leader_cost": sol.leader_cost,
            "dual_value": sol.dual_value, "gap": sol.gap, "iterations": sol.iterations,
            "feasible": sol.feasible, "f_norm": norm_H(problem.grid, sol.f), "stages": sol.stage_log}


def run_nash(sc):
    model, grid, cost = sc.model, sc.grid, sc.cost
    v = sc.leader_control()
    if sc.tracking is not None:
        sol = solve_nash_tracking(model, v, sc.tracking)
        costs = [tracking_cost(model, i, sol.w[i], sol.state.states, sc.tracking)
                 for i in range(sc.tracking.n_followers)]
        report = {"command": "nash", "mode": "tracking", "costs": costs, "el_residuals": sol.el_residuals,
                  "iterations": sol.iterations}
    else:
        sol = solve_nash(model, v, cost, seed=sc.seed("nash"))
        controls = ControlSet(v, list(sol.w), sc.leader_mask, cost.follower_masks)
        costs = [cost_J_i(model, i, controls, cost, sol.state.final) for i in range(cost.n_followers)]
        beta = beta0_estimate(model, cost, n_samples=0)
        report = {"command": "nash", "mode": "nash", "costs": costs, "el_residuals": sol.el_residuals,
                  "iterations": sol.iterations, "method": sol.method, "residual": sol.residual,
                  "nash_min_increase": sol.nash_min_increase, "beta0": beta.beta0}
    report["control_norms"] = [control_norm(grid, w) for w in sol.w]
    report["terminal_distance"] = norm_H(grid, sol.state.final - cost.target)
    fields = {f"w{i + 1}.oldn": w for i, w in enumerate(sol.w)}
    fields["state.oldn"] = sol.state.states
    return 0, report, {}, fields


def run_leader(sc):
    problem = sc.leader_problem()
    sol = minimize_dual(problem)
    vi, scale, _ = check_variational_inequality(sol, problem, sc.config.vi_samples, seed=sc.seed("vi"))
    report = {"command": "leader", **_leader_summary(sol, problem), "vi_min": vi, "vi_scale": scale,
              "vi_ok": vi >= -1e-6 * scale}
    fields = {"v.oldn": sol.v, "f.oldn": sol.f, "terminal.oldn": sol.terminal}
    return (0 if report["vi_ok"] else CHECKS_FAILED), report, {}, fields


def run_sweep(sc):
    problem = sc.leader_problem()
    rows = controllability_sweep(problem, sc.config.eps_list, seed=sc.seed("vi"),
                                 vi_samples=sc.config.vi_samples)
    checks = sweep_checks(rows, problem.tol_accept)
    report = {"command": "sweep", "target": sc.config.target, "rows": rows, **checks}
    return (0 if checks["feasible"] else CHECKS_FAILED), report, {"sweep.csv": sweep_csv(rows)}, {}


RUNNERS = {"verify": run_verify, "nash": run_nash, "leader": run_leader, "sweep": run_sweep}


def _table(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([json.dumps(_clean(x)) if not isinstance(x, str) else x for x in row])
    return buf.getvalue()


def run_scenario(config, command, out_dir):
    """Run one subcommand and write its artifacts; returns ``(exit_code, report)``."""
    if command not in RUNNERS:
        raise ValueError(f"unknown command {command!r}")
    sc = build_scenario(config)
    code, report, tables, fields = RUNNERS[command](sc)
    report = {"version": __version__, "seed": config.seed, "config": config.as_dict(),
              "params_hash": sc.model.param_hash, **report}
    os.makedirs(out_dir, exist_ok=True)
    if tables:
        os.makedirs(os.path.join(out_dir, "tables"), exist_ok=True)
        for name, text in tables.items():
            with open(os.path.join(out_dir, "tables", name), "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
    if fields:
        os.makedirs(os.path.join(out_dir, "fields"), exist_ok=True)
        for name, data in fields.items():
            write_checkpoint(os.path.join(out_dir, "fields", name), sc.grid, data)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(dumps(report))
    return code, report


def error_payload(exc):
    payload = {"status": "error", "type": type(exc).__name__, "code": getattr(exc, "code", 1),
               "message": str(exc)}
    if getattr(exc, "kind", None):
        payload["kind"] = exc.kind
    if getattr(exc, "line", None) is not None:
        payload["line"] = exc.line
    return payload


def build_parser():
    p = argparse.ArgumentParser(prog="oldnash", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="scenario INI file")
    p.add_argument("--out", default="oldnash-out", help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, default=None, help="override [run] seed (unsigned 64-bit)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, seed=args.seed)
        code, report = run_scenario(config, args.command, args.out)
    except OldnashError as exc:
        payload = error_payload(exc)
        sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
        try:
            os.makedirs(args.out, exist_ok=True)
            with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
                fh.write(dumps(payload))
        except OSError:
            pass
        return payload["code"]
    status = {"status": "ok" if code == 0 else "checks_failed", "command": args.command,
              "code": code, "report": os.path.join(args.out, "report.json")}
    sys.stdout.write(json.dumps(status, sort_keys=True) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
