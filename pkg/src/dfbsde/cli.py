"""Batch front end: problem files in, deterministic CSV/JSON out.

Subcommands
    solve-discrete    backward tables P_k, Mbar_k, band weights
    solve-continuous  backward kernel P(t), P(t,t), S(t)
    simulate          closed-loop Monte Carlo paths + residual report
    oracle            exact-lattice comparison for small trees
    lq-synth          delayed LQ gains K(t)
    lq-eval           Monte Carlo cost of the synthesized controller
    converge          discrete-to-continuous error table across deltas

Exit codes: 0 ok, 2 configuration/problem-file error, 3 numerical failure,
4 oracle mismatch beyond tolerance. Each run writes manifest.json echoing
the configuration and naming every emitted file; rerunning an identical
configuration reproduces every CSV byte for byte. Figures accompany the
tables unless --no-plot.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import io
from .continuous_riccati import integrate_backward
from .discrete_riccati import backward_sweep
from .errors import ConfigError, NumericalError, OracleMismatch, SolverError
from .lq import evaluate_cost, synthesize
from .model import build_grid, discretize, sample_noise
from .simulate import lattice_compare, residual_check, simulate_paths

CONVERGE_DIVISORS = (2, 4, 8, 16)
SLOPE_RANGE = (0.75, 1.25)


def _add_common(p: argparse.ArgumentParser, plots: bool = True):
    p.add_argument("--problem", required=True, help="JSON problem file")
    p.add_argument("--out", required=True, help="output directory")
    if plots:
        p.add_argument("--no-plot", action="store_true",
                       help="skip the report figure")


def _add_grid(p: argparse.ArgumentParser):
    p.add_argument("--d", type=int, default=None,
                   help="steps per delay window (delta = h/d)")
    p.add_argument("--delta", type=float, default=None,
                   help="time step (alternative to --d)")
    p.add_argument("--steps", type=int, default=None,
                   help="total step count (required when h = 0)")


def _add_noise(p: argparse.ArgumentParser):
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", choices=("gaussian", "rademacher"),
                   default="gaussian")


def _grid_from_args(spec, args):
    if args.delta is not None:
        if args.d is not None:
            raise ConfigError("give --d or --delta, not both")
        if spec.h > 0:
            d = int(round(spec.h / args.delta))
            if d < 1 or abs(d * args.delta - spec.h) > 1e-9 * spec.h:
                raise ConfigError(
                    f"--delta {args.delta} does not divide h = {spec.h}")
            return build_grid(spec.h, spec.T, d)
        steps = int(round(spec.T / args.delta))
        if steps < 1 or abs(steps * args.delta - spec.T) > 1e-9 * spec.T:
            raise ConfigError(
                f"--delta {args.delta} does not divide T = {spec.T}")
        return build_grid(spec.h, spec.T, 0, steps=steps)
    if spec.h == 0:
        if args.steps is None:
            raise ConfigError("h = 0 problems need --steps or --delta")
        return build_grid(spec.h, spec.T, 0, steps=args.steps)
    if args.d is None:
        raise ConfigError("give --d or --delta for a delayed problem")
    return build_grid(spec.h, spec.T, args.d, steps=args.steps)


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _config_echo(args, skip=("func", "out")) -> dict:
    cfg = {}
    for key, val in sorted(vars(args).items()):
        if key in skip or callable(val):
            continue
        cfg[key] = val
    return cfg


def _finish(args, mode: str, outputs: list) -> None:
    io.write_manifest(args.out, mode, _config_echo(args), outputs)
    for f in sorted(os.path.basename(p) for p in outputs):
        print(f"wrote {os.path.join(args.out, f)}")


def cmd_solve_discrete(args) -> int:
    spec = io.load_problem(args.problem)
    grid = _grid_from_args(spec, args)
    tables = backward_sweep(discretize(spec, grid))
    _ensure_out(args.out)
    outs = []
    for name, arr in (("P.csv", tables.P), ("Mbar.csv", tables.Mbar)):
        path = os.path.join(args.out, name)
        io.write_matrix_table(path, arr)
        outs.append(path)
    band_path = os.path.join(args.out, "band.csv")
    io.write_band_table(band_path, tables.band)
    outs.append(band_path)
    if not args.no_plot:
        from . import figures
        outs.append(figures.fig_discrete_tables(
            tables, grid, os.path.join(args.out, "tables.png")))
    print(f"solved {grid.n_steps} backward steps, delta = {grid.delta:g}, "
          f"worst gamma rcond = {np.min(tables.gamma_rcond[1:]):.3e}")
    _finish(args, "solve-discrete", outs)
    return 0


def cmd_solve_continuous(args) -> int:
    spec = io.load_problem(args.problem)
    kernel = integrate_backward(spec, args.eta, pt_closure=args.pt_closure)
    _ensure_out(args.out)
    outs = []
    kpath = os.path.join(args.out, "kernel.csv")
    io.write_kernel(kpath, kernel)
    outs.append(kpath)
    if not args.no_plot:
        from . import figures
        outs.append(figures.fig_kernel(
            kernel, os.path.join(args.out, "kernel.png")))
    print(f"integrated {kernel.times.size - 1} nodes at eta = {args.eta:g}, "
          f"closure = {args.pt_closure}")
    _finish(args, "solve-continuous", outs)
    return 0


def cmd_simulate(args) -> int:
    spec = io.load_problem(args.problem)
    grid = _grid_from_args(spec, args)
    noise = sample_noise(grid, args.paths, args.seed, kind=args.noise)
    if args.sim_mode == "discrete":
        tables = backward_sweep(discretize(spec, grid))
        ens = simulate_paths(spec, grid, noise, tables=tables)
        report = residual_check(ens, tables=tables)
    else:
        eta = args.eta if args.eta is not None else grid.delta / 4.0
        kernel = integrate_backward(spec, eta, pt_closure=args.pt_closure)
        ens = simulate_paths(spec, grid, noise, kernel=kernel)
        report = residual_check(ens, kernel=kernel, spec=spec)
    _ensure_out(args.out)
    outs = []
    ppath = os.path.join(args.out, "paths.csv")
    io.write_paths(ppath, ens)
    outs.append(ppath)
    rpath = os.path.join(args.out, "residuals.json")
    io.write_json(rpath, report.as_dict())
    outs.append(rpath)
    if not args.no_plot:
        from . import figures
        outs.append(figures.fig_paths(
            ens, os.path.join(args.out, "paths.png")))
    print(f"simulated {args.paths} {args.sim_mode} paths over "
          f"{grid.n_steps} steps: terminal residual "
          f"{report.terminal_max:.3e}, per-step residual {report.bsde_max:.3e}")
    _finish(args, "simulate", outs)
    return 0


def cmd_oracle(args) -> int:
    spec = io.load_problem(args.problem)
    grid = _grid_from_args(spec, args)
    ds = discretize(spec, grid)
    tables = backward_sweep(ds)
    cmp = lattice_compare(ds, tables=tables)
    cmp["tol"] = args.oracle_tol
    worst = max(cmp["max_rel_x"], cmp["max_rel_p"], cmp["max_rel_q"])
    cmp["pass"] = bool(worst <= args.oracle_tol)
    _ensure_out(args.out)
    outs = []
    opath = os.path.join(args.out, "oracle.json")
    io.write_json(opath, cmp)
    outs.append(opath)
    if not args.no_plot:
        from . import figures
        outs.append(figures.fig_oracle(
            cmp, os.path.join(args.out, "oracle.png")))
    print(f"lattice comparison over {cmp['nodes']} unknowns: "
          f"worst relative error {worst:.3e} (tol {args.oracle_tol:g})")
    _finish(args, "oracle", outs)
    if not cmp["pass"]:
        raise OracleMismatch(
            f"lattice disagreement {worst:.3e} exceeds {args.oracle_tol:g}")
    return 0


def cmd_lq_synth(args) -> int:
    spec = io.load_lq_problem(args.problem)
    gains = synthesize(spec, args.eta)
    _ensure_out(args.out)
    outs = []
    gpath = os.path.join(args.out, "gains.csv")
    io.write_gains(gpath, gains)
    outs.append(gpath)
    if not args.no_plot:
        from . import figures
        outs.append(figures.fig_gains(
            gains, os.path.join(args.out, "gains.png")))
    print(f"synthesized gains on {gains.times.size} nodes at "
          f"eta = {args.eta:g}")
    _finish(args, "lq-synth", outs)
    return 0


def cmd_lq_eval(args) -> int:
    spec = io.load_lq_problem(args.problem)
    gains = synthesize(spec, args.eta)
    grid = _grid_from_args(spec, args)
    noise = sample_noise(grid, args.paths, args.seed, kind=args.noise)
    report = evaluate_cost(spec, gains, grid, noise,
                           gain_scale=args.gain_scale)
    _ensure_out(args.out)
    outs = []
    cpath = os.path.join(args.out, "cost.json")
    io.write_json(cpath, report.as_dict())
    outs.append(cpath)
    if not args.no_plot:
        from . import figures
        outs.append(figures.fig_cost(
            report, os.path.join(args.out, "cost.png")))
    print(f"cost {report.mean:.6g} +- {report.stderr:.3g} "
          f"({args.paths} paths, gain scale {args.gain_scale:g})")
    _finish(args, "lq-eval", outs)
    return 0


def cmd_converge(args) -> int:
    spec = io.load_problem(args.problem)
    if spec.h <= 0:
        raise ConfigError("the convergence study needs a delayed problem")
    ref_eta = spec.h / max(256, 16 * CONVERGE_DIVISORS[-1])
    kernel = integrate_backward(spec, ref_eta, pt_closure=args.pt_closure)
    rows = []
    for dv in CONVERGE_DIVISORS:
        grid = build_grid(spec.h, spec.T, dv)
        tables = backward_sweep(discretize(spec, grid))
        err_p = 0.0
        err_s = 0.0
        for k in range(grid.N + 2):
            t = float(grid.times[k])
            err_p = max(err_p,
                        float(np.max(np.abs(tables.P[k] - kernel.P_at(t)))))
            err_s = max(err_s,
                        float(np.max(np.abs(tables.S[k] - kernel.S_at(t)))))
        rows.append((grid.delta, err_p, err_s))
    logd = np.log([r[0] for r in rows])
    slope_p = float(np.polyfit(logd, np.log([r[1] for r in rows]), 1)[0])
    slope_s = float(np.polyfit(logd, np.log([r[2] for r in rows]), 1)[0])
    _ensure_out(args.out)
    outs = []
    cpath = os.path.join(args.out, "converge.csv")
    io.write_converge(cpath, rows)
    outs.append(cpath)
    if not args.no_plot:
        from . import figures
        outs.append(figures.fig_converge(
            rows, slope_p, slope_s, os.path.join(args.out, "converge.png")))
    for delta, err_p, err_s in rows:
        print(f"delta {delta:.6g}: err_P {err_p:.6e}  err_S {err_s:.6e}")
    print(f"fitted slopes: P {slope_p:.3f}, S {slope_s:.3f}")
    _finish(args, "converge", outs)
    lo, hi = SLOPE_RANGE
    if not (lo <= slope_p <= hi and lo <= slope_s <= hi):
        raise NumericalError(
            f"fitted convergence slope outside [{lo}, {hi}]: "
            f"P {slope_p:.3f}, S {slope_s:.3f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="dfbsde",
        description="delayed forward-backward SDE solver toolkit")
    sub = ap.add_subparsers(dest="mode", required=True)

    p = sub.add_parser("solve-discrete", help="backward decoupling tables")
    _add_common(p)
    _add_grid(p)
    p.set_defaults(func=cmd_solve_discrete)

    p = sub.add_parser("solve-continuous", help="backward kernel ODE")
    _add_common(p)
    p.add_argument("--eta", type=float, required=True, help="ODE step")
    p.add_argument("--pt-closure", choices=("eq30", "remark6", "limit"),
                   default="eq30", help="diagonal kernel closure variant")
    p.set_defaults(func=cmd_solve_continuous)

    p = sub.add_parser("simulate", help="closed-loop Monte Carlo")
    _add_common(p)
    _add_grid(p)
    _add_noise(p)
    p.add_argument("--mode", dest="sim_mode", choices=("discrete",
                   "continuous"), default="discrete")
    p.add_argument("--eta", type=float, default=None,
                   help="kernel step for continuous mode (default delta/4)")
    p.add_argument("--pt-closure", choices=("eq30", "remark6", "limit"),
                   default="eq30")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle", help="exact lattice comparison")
    _add_common(p)
    _add_grid(p)
    p.add_argument("--oracle-tol", type=float, default=1e-8)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("lq-synth", help="delayed LQ gain synthesis")
    _add_common(p)
    p.add_argument("--eta", type=float, required=True)
    p.set_defaults(func=cmd_lq_synth)

    p = sub.add_parser("lq-eval", help="Monte Carlo controller cost")
    _add_common(p)
    _add_grid(p)
    _add_noise(p)
    p.add_argument("--eta", type=float, required=True,
                   help="synthesis step")
    p.add_argument("--gain-scale", type=float, default=1.0,
                   help="multiply the feedback gain (perturbation studies)")
    p.set_defaults(func=cmd_lq_eval)

    p = sub.add_parser("converge", help="discrete-vs-continuous error study")
    _add_common(p)
    p.add_argument("--pt-closure", choices=("eq30", "remark6", "limit"),
                   default="eq30")
    p.set_defaults(func=cmd_converge)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SolverError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
