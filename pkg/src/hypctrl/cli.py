"""Command-line front end.

Subcommands: times, check-b, simulate, dual, kernel, feedback, nullctrl,
witness, observability, sweep.  Exit codes: 0 success, 1 usage error,
2 validation/configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import backstepping as bs
from . import bmatrix, controller, outputs
from .config import load_config
from .core import (
    GridSpec,
    HypctrlError,
    NumericalError,
    StateField,
    ValidationError,
)
from .simulator import solve_dual, solve_forward
from .times import time_report


class UsageError(HypctrlError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="hypctrl", description=__doc__)
    sub = p.add_subparsers(dest="command", metavar="command")

    def common(sp, grid_flags=True):
        sp.add_argument("--config", required=True, help="experiment config file")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        if grid_flags:
            sp.add_argument("--N", type=int, default=None, help="grid cells")
            sp.add_argument("--T", type=float, default=None, help="time horizon")

    sp = sub.add_parser("times", help="travel times and control-time landmarks")
    common(sp, grid_flags=False)
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--quad-tol", type=float, default=1e-10)

    sp = sub.add_parser("check-b", help="reflection-matrix class membership")
    common(sp, grid_flags=False)
    sp.add_argument("--json", action="store_true")

    sp = sub.add_parser("simulate", help="forward run with configured controls")
    common(sp)
    sp.add_argument("--snap-times", default="", help="comma-separated snapshot times")
    sp.add_argument("--binary", action="store_true", help="also write a binary terminal snapshot")

    sp = sub.add_parser("dual", help="backward dual run with observation trace")
    common(sp)
    sp.add_argument("--use-kernel", type=int, default=0, metavar="NK",
                    help="solve the kernel at this resolution and use its source matrix")

    sp = sub.add_parser("kernel", help="solve the kernel equations and export")
    common(sp, grid_flags=False)
    sp.add_argument("--nk", type=int, default=None)
    sp.add_argument("--tolerance", type=float, default=None)
    sp.add_argument("--max-iters", type=int, default=None)

    sp = sub.add_parser("feedback", help="synthesize and run the finite-time feedback")
    common(sp)

    sp = sub.add_parser("nullctrl", help="open-loop least-squares null control")
    common(sp)
    sp.add_argument("--segments", type=int, default=None)
    sp.add_argument("--reg", type=float, default=None)

    sp = sub.add_parser("witness", help="below-optimal-time witness construction")
    common(sp)
    sp.add_argument("--samples", type=int, default=None, help="random controls to try")

    sp = sub.add_parser("observability", help="Monte Carlo observability estimate")
    common(sp)
    sp.add_argument("--samples", type=int, default=None)

    sp = sub.add_parser("sweep", help="parameter sweep of null-control residuals")
    common(sp)
    sp.add_argument("--jobs", type=int, default=None)
    sp.add_argument("--segments", type=int, default=None)
    sp.add_argument("--reg", type=float, default=None)
    return p


def _outdir(args, cfg) -> Path:
    out = Path(args.out if args.out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg) -> int:
    return args.seed if args.seed is not None else cfg.seed


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #

def _cmd_times(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.system()
    report = time_report(spec, args.quad_tol).as_dict()
    if args.json:
        import json

        print(json.dumps(outputs._sanitize(report), sort_keys=True))
    else:
        for key, value in report.items():
            print(f"{key} = {value}")
    return 0


def _cmd_check_b(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.system()
    rep = bmatrix.class_report(spec.B)
    if args.json:
        import json

        print(json.dumps(outputs._sanitize(rep), sort_keys=True))
    else:
        print(f"in class B:  {'yes' if rep['in_class_B'] else 'no'}")
        print(f"in class Be: {'yes' if rep['in_class_Be'] else 'no'}" + (
            f"  ({rep['note']})" if rep["note"] else ""
        ))
        for i, info in rep["minors"].items():
            print(
                f"trailing minor {i}x{i}: invertible={'yes' if info['invertible'] else 'no'} "
                f"rcond={info['rcond']!r}"
            )
        if rep["in_class_B"]:
            elim = bmatrix.boundary_elimination(spec.B)
            for mp in elim.maps:
                coef = ", ".join(repr(c) for c in mp.coef)
                print(f"level {mp.level}: w_{mp.control_component}(t,0) = [{coef}] . args")
    return 0


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.system()
    grid = cfg.grid(N=args.N, T=args.T)
    w0 = cfg.initial_state(grid, spec.n)
    closure = cfg.control_closure(spec.k, spec.m)
    traj = solve_forward(spec, w0, closure, grid)
    out = _outdir(args, cfg)
    outputs.write_norms_csv(out / "norms.csv", traj)
    snap_times = [float(s) for s in args.snap_times.split(",") if s.strip()]
    for t in snap_times:
        state = traj.state_at(t)
        outputs.write_snapshot_csv(out / f"snapshot_t{t:g}.csv", state)
    term = traj.terminal_state()
    outputs.write_snapshot_csv(out / "terminal.csv", term)
    if args.binary:
        outputs.write_binary_snapshot(out / "terminal.bin", term)
    print(
        f"simulate: T={grid.T} N={grid.N} terminal max|w| = "
        f"{outputs.fmt(np.max(np.abs(term.values)))}"
    )
    return 0


def _cmd_dual(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.system()
    T = args.T if args.T is not None else cfg.get("dual", "t", float, cfg.grid().T)
    grid = cfg.grid(N=args.N, T=T)
    v0 = cfg.dual_initial(grid, spec.n)
    S = None
    if args.use_kernel:
        base, gauge = bs.preprocess_diagonal(spec)
        kernel = bs.solve_kernel(base, NK=args.use_kernel)
        S = bs.source_matrix(kernel, base)
    dual = solve_dual(spec, S, spec.B, v0, T, grid)
    out = _outdir(args, cfg)
    outputs.write_csv(
        out / "observation.csv",
        ["t"] + [f"v_{spec.k + 1 + c}" for c in range(spec.m)],
        (
            [-dual.times[s]] + [dual.observation[s, c] for c in range(spec.m)]
            for s in range(dual.times.size)
        ),
    )
    outputs.write_snapshot_csv(out / "dual_terminal.csv", dual.terminal_state())
    print(f"dual: T={T} observation energy = {outputs.fmt(dual.observation_energy())}")
    return 0


def _cmd_kernel(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.system()
    NK = args.nk if args.nk is not None else cfg.get("kernel", "nk", int, 64)
    tol = args.tolerance if args.tolerance is not None else cfg.get(
        "kernel", "tolerance", float, 1e-10
    )
    iters = args.max_iters if args.max_iters is not None else cfg.get(
        "kernel", "max_iters", int, 200
    )
    base, gauge = bs.preprocess_diagonal(spec)
    kernel = bs.solve_kernel(base, NK=NK, max_iters=iters, fp_tolerance=tol)
    source = bs.source_matrix(kernel, base)
    out = _outdir(args, cfg)
    outputs.write_kernel_csv(out / "kernel.csv", kernel)
    outputs.write_source_csv(out / "source.csv", source)
    rep = kernel.report
    outputs.write_json(
        out / "kernel_report.json",
        {
            "NK": NK,
            "iterations": rep.iterations,
            "final_change": rep.final_change,
            "residual_linf": rep.residual_linf,
            "source_lower_triangle_max": source.lower_triangle_max,
            "diagonal_gauge_applied": not gauge.identity,
        },
    )
    print(
        f"kernel: NK={NK} iterations={rep.iterations} residual={outputs.fmt(rep.residual_linf)} "
        f"S_++ lower max={outputs.fmt(source.lower_triangle_max)}"
    )
    return 0


def _cmd_feedback(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.system()
    T = args.T if args.T is not None else cfg.get("feedback", "t", float, cfg.grid().T)
    grid = cfg.grid(N=args.N, T=T)
    w0 = cfg.initial_state(grid, spec.n)
    law = controller.synthesize_feedback(spec, spec.B, T, w0)
    traj, rep = controller.run_closed_loop(spec, law, w0, grid)
    out = _outdir(args, cfg)
    outputs.write_norms_csv(out / "closed_loop_norms.csv", traj)
    outputs.write_json(
        out / "feedback_report.json",
        {
            "T": T,
            "T_opt": law.Topt,
            "delta": law.ramps.delta,
            "initial_linf": rep.initial_linf,
            "terminal_linf": rep.terminal_linf,
            "terminal_rel": rep.terminal_rel,
            "first_below_1e2": rep.first_below_1e2,
            "first_below_1e3": rep.first_below_1e3,
        },
    )
    print(
        f"feedback: T={T} T_opt={outputs.fmt(law.Topt)} "
        f"terminal rel = {outputs.fmt(rep.terminal_rel)}"
    )
    return 0


def _cmd_nullctrl(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.system()
    T = args.T if args.T is not None else cfg.get("nullctrl", "t", float, cfg.grid().T)
    segments = args.segments if args.segments is not None else cfg.get(
        "nullctrl", "segments", int, 64
    )
    reg = args.reg if args.reg is not None else cfg.get("nullctrl", "reg", float, 1e-8)
    grid = cfg.grid(N=args.N)
    w0 = cfg.initial_state(grid, spec.n)
    res = controller.null_control_openloop(spec, w0, T, grid, reg=reg, segments=segments)
    out = _outdir(args, cfg)
    outputs.write_control_csv(out / "control.csv", res.signal, spec.k)
    outputs.write_json(
        out / "nullctrl_report.json",
        {
            "T": T,
            "segments": segments,
            "reg": reg,
            "residual": res.residual,
            "condition": res.condition,
            "ill_conditioned": res.ill_conditioned,
        },
    )
    print(f"nullctrl: T={T} residual = {outputs.fmt(res.residual)}")
    return 0


def _cmd_witness(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.system()
    T = args.T if args.T is not None else cfg.get("witness", "t", float, cfg.grid().T)
    samples = args.samples if args.samples is not None else cfg.get(
        "witness", "samples", int, 100
    )
    amplitude = cfg.get("witness", "amplitude", float, 1.0)
    grid = cfg.grid(N=args.N, T=T)
    wit = controller.optimality_witness(spec, spec.B, T, grid, amplitude=amplitude)
    rng = np.random.default_rng(_seed(args, cfg))
    deviation, values = controller.verify_witness(
        spec, spec.B, wit, grid, n_controls=samples, rng=rng, T=T
    )
    out = _outdir(args, cfg)
    outputs.write_snapshot_csv(out / "witness_initial.csv", wit.w0)
    outputs.write_json(
        out / "witness_report.json",
        {
            "T": T,
            "probe_component": wit.probe_component,
            "probe_x": wit.probe_x,
            "expected": wit.expected,
            "bump_component": wit.bump_component,
            "bump_center": wit.bump_center,
            "bump_halfwidth": wit.bump_halfwidth,
            "description": wit.description,
            "max_relative_deviation": deviation,
            "n_controls": samples,
        },
    )
    print(
        f"witness: T={T} probe w_{wit.probe_component}({outputs.fmt(wit.probe_x)}) "
        f"max deviation = {outputs.fmt(deviation)} over {samples} controls"
    )
    return 0


def _cmd_observability(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.system()
    T = args.T if args.T is not None else cfg.get("observability", "t", float, cfg.grid().T)
    samples = args.samples if args.samples is not None else cfg.get(
        "observability", "samples", int, 16
    )
    grid = cfg.grid(N=args.N)
    rng = np.random.default_rng(_seed(args, cfg))
    res = controller.verify_observability(spec, None, spec.B, T, samples, grid, rng=rng)
    out = _outdir(args, cfg)
    outputs.write_csv(
        out / "observability_samples.csv",
        ["sample", "ratio"],
        ([label, ratio] for label, ratio in zip(res.labels, res.ratios)),
    )
    outputs.write_json(
        out / "observability_report.json",
        {"T": T, "samples": samples, "estimate": res.estimate},
    )
    print(f"observability: T={T} estimate = {outputs.fmt(res.estimate)}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    base_spec = cfg.system()
    T = args.T if args.T is not None else cfg.get("sweep", "t", float, cfg.grid().T)
    segments = args.segments if args.segments is not None else cfg.get(
        "sweep", "segments", int, 32
    )
    reg = args.reg if args.reg is not None else cfg.get("sweep", "reg", float, 1e-8)
    gammas = _floats_or(cfg.get("sweep", "gamma_values"), [1.0])
    bscales = _floats_or(cfg.get("sweep", "b_scale_values"), [1.0])
    grid = cfg.grid(N=args.N)
    jobs = args.jobs if args.jobs is not None else (
        cfg.jobs or int(os.environ.get("HYPCTRL_JOBS", "1"))
    )
    jobs = max(1, jobs)

    from .core import build_system

    points = [(g, bsc) for g in gammas for bsc in bscales]

    def run_point(point):
        gamma, bscale = point
        try:
            spec = build_system(
                base_spec.k,
                base_spec.m,
                base_spec.profile.speeds,
                coupling=base_spec.coupling.with_gamma(
                    base_spec.coupling.gamma * gamma
                ),
                b=bscale * base_spec.B,
            )
            w0 = cfg.initial_state(grid, spec.n)
            res = controller.null_control_openloop(
                spec, w0, T, grid, reg=reg, segments=segments
            )
            return gamma, bscale, res.residual, res.condition
        except HypctrlError:
            return gamma, bscale, float("nan"), float("nan")

    if jobs == 1:
        results = [run_point(p) for p in points]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_point, points))

    out = _outdir(args, cfg)
    outputs.write_csv(
        out / "sweep.csv",
        ["gamma", "b_scale", "residual", "condition"],
        results,
    )
    finite = [r[2] for r in results if np.isfinite(r[2])]
    worst = max(finite) if finite else float("nan")
    print(f"sweep: {len(results)} points, worst residual = {outputs.fmt(worst)}")
    return 0


def _floats_or(raw, default):
    if raw is None:
        return default
    return [float(p) for p in str(raw).replace(",", " ").split()]


_COMMANDS = {
    "times": _cmd_times,
    "check-b": _cmd_check_b,
    "simulate": _cmd_simulate,
    "dual": _cmd_dual,
    "kernel": _cmd_kernel,
    "feedback": _cmd_feedback,
    "nullctrl": _cmd_nullctrl,
    "witness": _cmd_witness,
    "observability": _cmd_observability,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
