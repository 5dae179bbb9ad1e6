"""Command-line interface: single solves and convergence sweeps."""

from __future__ import annotations

import argparse
import sys

from . import harness, model
from .mesh import build_unit_square_mesh
from .solver import SolverConfig, SolverError, run
from .stab import StabConsts

_METHODS = ("galerkin", "asgs-static", "asgs-dynamic")


def _read_config_file(path) -> dict[str, str]:
    """Plain key=value file; '#' starts a comment, keys match flag names."""
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_").lstrip("_")] = value.strip()
    return values


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stabflow",
        description="Stabilized finite-element solver for power-law flow "
        "coupled with solute transport on the unit square.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--method", choices=_METHODS, default="asgs-dynamic")
        p.add_argument("--re", type=float, default=1000.0,
                       help="Reynolds number; sets the consistency factor to "
                       "1/Re in one-way coupling")
        p.add_argument("--power-index", type=float, default=1.0)
        p.add_argument("--theta", type=float, default=1.0,
                       help="1 = backward Euler, 0 = Crank-Nicolson")
        p.add_argument("--coupling", choices=("one-way", "strong"), default="one-way")
        p.add_argument("--alpha", type=float, default=0.01)
        p.add_argument("--c1", type=float, default=4.0)
        p.add_argument("--c2", type=float, default=2.0)
        p.add_argument("--c3", type=float, default=1.0)
        p.add_argument("--t-final", type=float, default=1.0)
        p.add_argument("--consistency", type=float, default=1.0,
                       help="consistency factor for strong coupling")
        p.add_argument("--coupling-exponent", type=float, default=1.0,
                       help="viscosity-concentration exponent for strong coupling")
        p.add_argument("--config", default=None,
                       help="key=value file; command-line flags override it")

    p_solve = sub.add_parser("solve", help="run one configuration and write fields")
    add_common(p_solve)
    p_solve.add_argument("--grid", type=int, default=10)
    p_solve.add_argument("--dt", type=float, default=None,
                         help="time step (default 1/grid)")
    p_solve.add_argument("--fields-out", default="fields.vtk",
                         help="legacy ASCII VTK output for the final state")
    p_solve.add_argument("--out", default=None,
                         help="unused for solve; accepted for symmetry")

    p_conv = sub.add_parser("convergence", help="run a refinement sweep, write CSV")
    add_common(p_conv)
    p_conv.add_argument("--levels", default="10,20,40,80",
                        help="comma-separated grid subdivisions")
    p_conv.add_argument("--dt", type=float, default=None,
                        help="dt of the first level (default 1/grid); finer "
                        "levels scale it with the grid")
    p_conv.add_argument("--workers", type=int, default=1,
                        help="levels to run concurrently")
    p_conv.add_argument("--out", default="convergence.csv")
    p_conv.add_argument("--fields-out", default=None,
                        help="unused for convergence; accepted for symmetry")
    return parser


def _apply_config_file(parser, argv):
    """Seed parser defaults from --config so explicit flags win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv)
    if known.config is None:
        return
    file_values = _read_config_file(known.config)
    for action_group in parser._subparsers._group_actions:
        for sub in action_group.choices.values():
            defaults = {}
            for action in sub._actions:
                key = action.dest.replace("-", "_")
                if key in file_values:
                    raw = file_values[key]
                    defaults[action.dest] = action.type(raw) if action.type else raw
            sub.set_defaults(**defaults)


def _params_from_args(args) -> model.PhysicalParams:
    if args.coupling == "one-way":
        return model.PhysicalParams.one_way(
            reynolds=args.re, power_index=args.power_index, alpha=args.alpha
        )
    return model.PhysicalParams.strong(
        power_index=args.power_index,
        consistency=args.consistency,
        coupling_exponent=args.coupling_exponent,
        alpha=args.alpha,
    )


def _config_from_args(args, dt: float) -> SolverConfig:
    if args.theta not in (0.0, 1.0):
        raise ValueError("theta must be 0 (Crank-Nicolson) or 1 (backward Euler)")
    return SolverConfig(
        method=args.method,
        theta=args.theta,
        dt=dt,
        t_final=args.t_final,
        consts=StabConsts(c1=args.c1, c2=args.c2, c3=args.c3),
    )


def _cmd_solve(args) -> int:
    dt = args.dt if args.dt is not None else 1.0 / args.grid
    cfg = _config_from_args(args, dt)
    params = _params_from_args(args)
    mesh = build_unit_square_mesh(args.grid)
    states, _ = run(cfg, params, mesh)
    harness.write_vtk(mesh, states[-1], args.fields_out)
    print(f"wrote {args.fields_out} ({len(states) - 1} steps, grid {args.grid})")
    return 0


def _cmd_convergence(args) -> int:
    grids = [int(tok) for tok in args.levels.split(",") if tok.strip()]
    if not grids:
        raise ValueError("--levels must list at least one grid size")
    first_dt = args.dt if args.dt is not None else 1.0 / grids[0]
    levels = [(n, first_dt * grids[0] / n) for n in grids]
    cfg = _config_from_args(args, levels[0][1])
    params = _params_from_args(args)
    try:
        rows = harness.convergence_study(levels, cfg, params, workers=args.workers)
    except harness.StudyAborted as exc:
        harness.write_csv(exc.rows, args.out)
        print(f"aborted after {len(exc.rows)} levels: {exc.cause}", file=sys.stderr)
        return 1
    harness.write_csv(rows, args.out)
    print(f"wrote {args.out} ({len(rows)} levels)")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        if args.command == "solve":
            return _cmd_solve(args)
        return _cmd_convergence(args)
    except (ValueError, OSError, SolverError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
