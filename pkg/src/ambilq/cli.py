"""Command-line front door.

Subcommands: solve-lq, gheat, robust-eval, verify-mp, example-tstar.
Every run writes its outputs plus a ``manifest.json`` into --out; the
manifest is written last, so its presence signals a completed run, and it
is the only file carrying timestamps (scalar results and tables are
byte-reproducible for fixed arguments and seed).  Exit codes: 0 ok,
1 configuration problem, 2 numeric failure, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    AlignmentError,
    AmbilqError,
    BudgetExceededError,
    CFLError,
    ConfigError,
    PositivityLossError,
    ScenarioShapeError,
    SingularGainError,
)
from .gheat import default_grid, g_expectation, solve_g_heat, write_layers_csv
from .problem import (
    AmbiguityBounds,
    LQProblem,
    VolatilityScenario,
    load_problem,
    problem_hash,
    validate_problem,
)
from .riccati import optimal_feedback, solve_riccati, write_riccati_csv
from .robust import ScenarioFamily, example_worst_case, robust_cost
from .simulate import SimConfig, k_residual
from .verify import (
    gateaux_check,
    hamiltonian_stationarity,
    sufficient_condition_check,
    variational_inequality_check,
)

DEFAULT_SEED = 20260808

_PAYOFFS = {
    "square": lambda x: x ** 2,
    "neg-square": lambda x: -(x ** 2),
    "abs": lambda x: np.abs(x),
    "call": lambda x: np.maximum(x, 0.0),
    "linear": lambda x: x,
}


class _Run:
    """Collects output files and writes the manifest last."""

    def __init__(self, args, subcommand: str):
        self.out = Path(args.out) if args.out else Path(f"ambilq-{subcommand}")
        self.subcommand = subcommand
        self.args = args
        self.outputs: list[str] = []
        self.started = time.time()
        self.manifest_path = self.out / "manifest.json"
        if self.manifest_path.exists() and not args.force:
            raise ConfigError(
                f"{self.manifest_path} exists; pass --force to overwrite a completed run"
            )
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out / name
        self.outputs.append(name)
        return p

    def write_json(self, name: str, payload: dict) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        return p

    def figure(self, name: str, fig) -> None:
        if getattr(self.args, "no_figures", False):
            return
        from . import plots

        plots.save(fig, self.path(name))

    def finish(self, extra: dict | None = None) -> None:
        snapshot = {k: v for k, v in vars(self.args).items() if k != "func"}
        manifest = {
            "subcommand": self.subcommand,
            "config_snapshot": snapshot,
            "outputs": sorted(self.outputs),
            "duration_s": time.time() - self.started,
            "started_unix": self.started,
            "version": __version__,
        }
        if extra:
            manifest.update(extra)
        self.manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _load_config(args) -> LQProblem:
    if not args.config:
        raise ConfigError("--config PATH is required for this subcommand")
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return load_problem(path.read_text())


def _require_valid(p: LQProblem) -> None:
    violations = validate_problem(p)
    if violations:
        lines = "; ".join(str(v) for v in violations)
        raise ConfigError(f"problem fails standing conditions: {lines}")


def _sim_config(args, p_horizon: float, n_intervals: int | None = None) -> SimConfig:
    dt = args.dt if args.dt else p_horizon / 500.0
    if n_intervals:
        # simulation steps must tile every scenario cell; snap dt to the
        # nearest divisor of the cell width and report the value used
        cell = p_horizon / n_intervals
        dt = cell / max(1, round(cell / dt))
    return SimConfig(n_paths=args.paths, dt_sim=dt, seed=args.seed)


def cmd_solve_lq(args) -> int:
    p = _load_config(args)
    _require_valid(p)
    run = _Run(args, "solve-lq")
    level = p.bounds.sigma_bar_sq if args.gamma == "bar" else p.bounds.sigma_low_sq
    scenario = VolatilityScenario.constant(level, p.horizon)
    ric = solve_riccati(p, scenario, n_steps=args.steps)
    ctrl = optimal_feedback(p, ric)
    write_riccati_csv(ric, ctrl, run.path("riccati.csv"))
    run.write_json("summary.json", {
        "problem_hash": problem_hash(p),
        "gamma": args.gamma,
        "gamma_value": level,
        "n_steps": args.steps,
        "value": ric.value_at_initial(),
        "P0": ric.P[0].tolist(),
        "phi0": ric.phi[0].tolist(),
        "l0": float(ric.l[0]),
    })
    if not args.no_figures:
        from . import plots

        run.figure("fig_riccati.png", plots.riccati_figure(ric, ctrl))
    run.finish({"problem_hash": problem_hash(p)})
    return 0


def cmd_gheat(args) -> int:
    if args.config:
        bounds = _load_config(args).bounds
    elif args.sbar2 is not None and args.slow2 is not None:
        bounds = AmbiguityBounds(args.sbar2, args.slow2)
    else:
        raise ConfigError("either --config or both --sbar2/--slow2 are required")
    if args.payoff not in _PAYOFFS:
        raise ConfigError(f"unknown payoff {args.payoff!r}; choose from {sorted(_PAYOFFS)}")
    run = _Run(args, "gheat")
    grid = default_grid(bounds, args.T, n_space=args.nx,
                        width_sds=args.x_width_sd, cfl_target=args.cfl)
    sol = solve_g_heat(_PAYOFFS[args.payoff], args.T, bounds, grid, payoff_label=args.payoff)
    write_layers_csv(sol, run.path("layers.csv"))
    run.write_json("summary.json", {
        "payoff": args.payoff,
        "horizon": args.T,
        "sigma_bar_sq": bounds.sigma_bar_sq,
        "sigma_low_sq": bounds.sigma_low_sq,
        "n_space": grid.n_space,
        "n_time": grid.n_time,
        "cfl": grid.cfl_number(args.T, bounds),
        "value": sol.expectation,
    })
    if not args.no_figures:
        from . import plots

        run.figure("fig_gheat.png", plots.gheat_figure(sol))
    run.finish()
    return 0


def cmd_robust_eval(args) -> int:
    p = _load_config(args)
    _require_valid(p)
    run = _Run(args, "robust-eval")
    cfg = _sim_config(args, p.horizon, n_intervals=args.n_intervals)
    scenario = VolatilityScenario.constant(p.bounds.sigma_bar_sq, p.horizon)
    ric = solve_riccati(p, scenario, n_steps=args.steps)
    ctrl = optimal_feedback(p, ric)
    family = ScenarioFamily.bang_bang(p.bounds, p.horizon, args.n_intervals,
                                      restriction=args.restriction)
    result = robust_cost(p, ctrl, family, cfg, workers=args.workers)
    with open(run.path("table.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"gamma_{i}" for i in range(args.n_intervals)] + ["mean", "stderr", "hash"])
        for values, mean, stderr, shash in result.table:
            w.writerow([repr(v) for v in values] + [repr(mean), repr(stderr), shash])
    run.write_json("report.json", {
        "problem_hash": problem_hash(p),
        "control_hash": ctrl.content_hash(),
        "family": {
            "n_intervals": args.n_intervals,
            "levels": list(family.levels),
            "restriction": family.restriction,
        },
        "method": result.method,
        "value": result.value,
        "value_stderr": result.argmax_stderr,
        "argmax_values": result.argmax_scenario.values.tolist(),
        "argmax_breakpoints": result.argmax_scenario.breakpoints.tolist(),
        "synthesized_value": ric.value_at_initial(),
        "n_paths": cfg.n_paths,
        "dt_sim": cfg.dt_sim,
        "seed": cfg.seed,
    })
    if not args.no_figures:
        from . import plots

        run.figure("fig_robust.png", plots.robust_figure(result))
    run.finish({"problem_hash": problem_hash(p)})
    return 0


def cmd_verify_mp(args) -> int:
    p = _load_config(args)
    _require_valid(p)
    run = _Run(args, "verify-mp")
    # the derivative probes and residual scenarios share one grid; align the
    # step with both the family cells and the half-horizon probe
    cfg = _sim_config(args, p.horizon, n_intervals=2 * args.n_intervals)
    bar = VolatilityScenario.constant(p.bounds.sigma_bar_sq, p.horizon)
    ric = solve_riccati(p, bar, n_steps=args.steps)
    ctrl = optimal_feedback(p, ric)
    if args.perturb_gain:
        ctrl = ctrl.with_scaled_gain(1.0 + args.perturb_gain)

    checks = []

    def record(name, value, tolerance, passed):
        checks.append({"name": name, "value": float(value), "tolerance": float(tolerance),
                       "passed": bool(passed)})

    suff = sufficient_condition_check(p)
    record("convexity premises (min eigenvalue)",
           min(c.min_eigenvalue for c in suff.checks), 0.0, suff.passed)

    hu = hamiltonian_stationarity(p, ric, cfg, ctrl=ctrl)
    record("max |H_u| under upper-rate scenario", hu, args.hu_tol, hu <= args.hu_tol)

    probe = [bar, VolatilityScenario.constant(p.bounds.sigma_low_sq, p.horizon)]
    half = np.array([p.bounds.sigma_low_sq, p.bounds.sigma_bar_sq])
    probe.append(VolatilityScenario.from_values(p.horizon, half))
    worst_k = -np.inf
    for sc in probe:
        _, _, kmax = k_residual(p, ctrl, sc, ric, cfg)
        worst_k = max(worst_k, kmax)
    record("max per-path martingale residual", worst_k, 1e-10, worst_k <= 1e-10)

    directions = [1.0, -1.0, lambda t: np.full(p.m, t / p.horizon)]
    vres = variational_inequality_check(p, ric, directions, cfg, ctrl=ctrl)
    slack = -3.0 * max(vres.min_stderr, 1e-12)
    record("min direction estimate of first-order expansion",
           vres.min_estimate, slack, vres.min_estimate >= slack)

    family = ScenarioFamily.bang_bang(p.bounds, p.horizon, args.n_intervals)
    report = gateaux_check(p, ctrl, 1.0, (0.1, 0.05, 0.025), family, cfg, workers=args.workers)
    g_slack = -3.0 * max(float(report.quotient_stderrs[-1]), 1e-12)
    record("extrapolated cost derivative along unit direction",
           report.limit_estimate, g_slack, report.limit_estimate >= g_slack)
    drop = report.quotients[:-1] - report.quotients[1:]  # ladder is decreasing in rho
    mono = bool(np.all(drop >= -(3.0 * report.quotient_stderrs[1:] + 1e-9)))
    record("difference quotients nonincreasing as step shrinks", 1.0 if mono else 0.0, 1.0, mono)

    passed = all(c["passed"] for c in checks)
    run.write_json("report.json", {
        "problem_hash": problem_hash(p),
        "control_hash": ctrl.content_hash(),
        "perturb_gain": args.perturb_gain,
        "checks": checks,
        "passed": passed,
        "n_paths": cfg.n_paths,
        "dt_sim": cfg.dt_sim,
        "seed": cfg.seed,
    })
    if not args.no_figures:
        from . import plots

        run.figure("fig_verify.png", plots.verify_figure(checks))
    run.finish({"problem_hash": problem_hash(p)})
    if not passed:
        failing = [c["name"] for c in checks if not c["passed"]]
        print(f"verification failed: {', '.join(failing)}", file=sys.stderr)
        return 3
    return 0


def cmd_example_tstar(args) -> int:
    bounds = AmbiguityBounds(args.sbar2, args.slow2)
    if args.a <= bounds.sigma_bar_sq:
        raise ConfigError("--a must exceed --sbar2")
    run = _Run(args, "example-tstar")
    restriction = "full" if args.full_enumeration else "single-switch"
    family = ScenarioFamily.bang_bang(bounds, args.T, args.N, restriction=restriction)
    result = example_worst_case(args.a, bounds, args.T, family)
    run.write_json("result.json", {
        "a": args.a,
        "sigma_bar_sq": args.sbar2,
        "sigma_low_sq": args.slow2,
        "horizon": args.T,
        "n_intervals": args.N,
        "restriction": restriction,
        "t_star_numeric": result.t_star_numeric,
        "value": result.value,
        "argmax_values": result.argmax_scenario.values.tolist(),
    })
    if result.switch_values is not None:
        with open(run.path("curve.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["switch_time", "objective"])
            switches = family.breakpoints[::-1]
            for s, v in zip(switches, result.switch_values):
                w.writerow([repr(float(s)), repr(float(v))])
    if not args.no_figures and result.switch_values is not None:
        from . import plots

        run.figure("fig_tstar.png",
                   plots.tstar_figure(family.breakpoints, result.switch_values,
                                      result.t_star_numeric))
    run.finish()
    return 0


def _add_common(sp) -> None:
    sp.add_argument("--config", help="problem configuration file (JSON schema)")
    sp.add_argument("--seed", type=int, default=DEFAULT_SEED,
                    help=f"simulation seed (default {DEFAULT_SEED})")
    sp.add_argument("--paths", type=int, default=256, help="Monte Carlo paths")
    sp.add_argument("--dt", type=float, default=None,
                    help="simulation step (default T/500; scenario-family "
                         "subcommands snap it to divide the cell width)")
    sp.add_argument("--workers", type=int, default=1, help="cap on module parallelism")
    sp.add_argument("--out", default=None, help="output directory")
    sp.add_argument("--force", action="store_true", help="overwrite an existing manifest")
    sp.add_argument("--no-figures", action="store_true", help="skip figure rendering")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ambilq",
        description="LQ stochastic control under volatility ambiguity",
    )
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="subcommand", required=True)

    sp = sub.add_parser("solve-lq", help="solve the backward feedback-synthesis system")
    _add_common(sp)
    sp.add_argument("--steps", type=int, default=2000, help="backward integration steps")
    sp.add_argument("--gamma", choices=("bar", "low"), default="bar",
                    help="constant variance-rate scenario for the solve")
    sp.set_defaults(func=cmd_solve_lq)

    sp = sub.add_parser("gheat", help="worst-case expectation of a payoff via the nonlinear heat solve")
    _add_common(sp)
    sp.add_argument("--payoff", default="square", help=f"one of {sorted(_PAYOFFS)}")
    sp.add_argument("--T", type=float, default=1.0, help="horizon")
    sp.add_argument("--nx", type=int, default=801, help="spatial nodes")
    sp.add_argument("--x-width-sd", type=float, default=6.0, help="half-width in standard deviations")
    sp.add_argument("--cfl", type=float, default=0.45, help="target CFL number (must be <= 0.5)")
    sp.add_argument("--sbar2", type=float, default=None, help="upper variance rate")
    sp.add_argument("--slow2", type=float, default=None, help="lower variance rate")
    sp.set_defaults(func=cmd_gheat)

    sp = sub.add_parser("robust-eval", help="worst-case cost of the synthesized feedback")
    _add_common(sp)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--n-intervals", type=int, default=10, help="scenario family intervals")
    sp.add_argument("--restriction", choices=("full", "single-switch"), default="full")
    sp.set_defaults(func=cmd_robust_eval)

    sp = sub.add_parser("verify-mp", help="first-order optimality verification report")
    _add_common(sp)
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--hu-tol", type=float, default=1e-4, help="stationarity tolerance")
    sp.add_argument("--n-intervals", type=int, default=6, help="family size for derivative probes")
    sp.add_argument("--perturb-gain", type=float, default=0.0,
                    help="relative gain perturbation (nonzero should fail verification)")
    sp.set_defaults(func=cmd_verify_mp)

    sp = sub.add_parser("example-tstar", help="worst-case switch time of the uncontrolled example")
    _add_common(sp)
    sp.add_argument("--a", type=float, required=True, help="drift slope (must exceed --sbar2)")
    sp.add_argument("--sbar2", type=float, required=True)
    sp.add_argument("--slow2", type=float, required=True)
    sp.add_argument("--T", type=float, default=1.0)
    sp.add_argument("--N", type=int, default=20, help="scenario family intervals")
    sp.add_argument("--full-enumeration", action="store_true",
                    help="search the full bang-bang family instead of single switches")
    sp.set_defaults(func=cmd_example_tstar)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (CFLError, SingularGainError, PositivityLossError, AlignmentError,
            BudgetExceededError, ScenarioShapeError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except AmbilqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
