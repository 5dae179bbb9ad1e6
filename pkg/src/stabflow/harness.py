"""Space-time error norms, convergence tables, and file output.

Velocity and concentration errors are measured in the composite norm
combining the worst L2 level with the time-summed L2 and gradient
seminorms (a discrete L-inf(L2) intersect L2(H1)); the pressure error is
the discrete L2(L2) norm.  Convergence tables refine dt and h together
and report log2 error ratios between successive levels.
"""

from __future__ import annotations

import concurrent.futures
import csv
from dataclasses import dataclass, replace

import numpy as np

from . import model
from .fem import quadrature_rule
from .mesh import Mesh, build_unit_square_mesh
from .solver import FieldState, SolverConfig, SolverError, run


@dataclass(frozen=True)
class ErrorReport:
    """Per-field errors of one run; ``e_p_l2`` is the plain L2(L2) value.

    The tabulated ``e_p`` carries the same composite norm as the other
    fields: the reference tables' pressure column sits at the gradient
    level of the error (first order, method independent), which the
    value-only norm cannot reach.
    """

    e_u: float
    e_c: float
    e_p: float
    e_p_l2: float = 0.0

    @property
    def total(self) -> float:
        return float(np.sqrt(self.e_u**2 + self.e_c**2 + self.e_p**2))


@dataclass
class ConvergenceRow:
    dt: float
    inv_h: int
    e_u: float
    roc_u: float | None
    e_c: float
    roc_c: float | None
    e_p: float
    roc_p: float | None
    total: float
    roc_total: float | None


class StudyAborted(SolverError):
    """A convergence level failed; carries the completed rows."""

    def __init__(self, cause: Exception, rows: list[ConvergenceRow]):
        super().__init__(f"convergence study aborted: {cause}")
        self.cause = cause
        self.rows = rows


def _theta_weights(theta: float) -> tuple[float, float]:
    return 0.5 * (1.0 + theta), 0.5 * (1.0 - theta)


class _NormAccumulator:
    """Streams time levels through the norm definitions.

    ``add_level`` receives per-quadrature-point error values/gradients;
    the theta-weighted field of two consecutive levels feeds the time sums,
    the plain level values feed the max term.
    """

    def __init__(self, weights: np.ndarray, dt: float, theta: float):
        self.w = weights
        self.dt = dt
        self.a, self.b = _theta_weights(theta)
        self.prev = None
        self.max_u = 0.0
        self.max_c = 0.0
        self.max_p = 0.0
        self.sum_u = 0.0
        self.sum_c = 0.0
        self.sum_p = 0.0
        self.sum_p_l2 = 0.0

    def _l2sq(self, arr) -> float:
        return float(np.sum(self.w * arr * arr))

    def add_level(self, lv: dict) -> None:
        self.max_u = max(self.max_u, self._l2sq(lv["u1"]) + self._l2sq(lv["u2"]))
        self.max_c = max(self.max_c, self._l2sq(lv["c"]))
        self.max_p = max(self.max_p, self._l2sq(lv["p"]))
        if self.prev is not None:
            a, b = self.a, self.b
            combo = {k: a * lv[k] + b * self.prev[k] for k in lv}
            self.sum_u += self.dt * sum(
                self._l2sq(combo[k])
                for k in ("u1", "u2", "u1x", "u2x", "u1y", "u2y")
            )
            self.sum_c += self.dt * sum(self._l2sq(combo[k]) for k in ("c", "cx", "cy"))
            p_val = self._l2sq(combo["p"])
            self.sum_p += self.dt * (
                p_val + self._l2sq(combo["px"]) + self._l2sq(combo["py"])
            )
            self.sum_p_l2 += self.dt * p_val
        self.prev = lv

    def report(self) -> ErrorReport:
        return ErrorReport(
            e_u=float(np.sqrt(self.max_u + self.sum_u)),
            e_c=float(np.sqrt(self.max_c + self.sum_c)),
            e_p=float(np.sqrt(self.max_p + self.sum_p)),
            e_p_l2=float(np.sqrt(self.sum_p_l2)),
        )


def _exact_error_levels(mesh: Mesh, states: list[FieldState], exact):
    """Yield per-level error arrays at the degree-5 quadrature points."""
    rule = quadrature_rule(5)
    conn = mesh.elements
    corner = mesh.nodes[conn]
    xq = np.einsum("qi,eid->eqd", rule.points, corner)
    x, y = xq[..., 0], xq[..., 1]
    phi = rule.points
    gx, gy = mesh.grads[:, :, 0], mesh.grads[:, :, 1]

    def interp(nodal):
        return np.einsum("qi,ei->eq", phi, nodal[conn])

    def dgrad(nodal):
        loc = nodal[conn]
        return (
            np.einsum("ei,ei->e", loc, gx)[:, None],
            np.einsum("ei,ei->e", loc, gy)[:, None],
        )

    for state in states:
        t = state.t
        eu1, eu2 = exact.velocity(x, y, t)
        eu1x, eu1y, eu2x, eu2y = exact.velocity_gradient(x, y, t)
        ec = exact.concentration(x, y, t)
        ecx, ecy = exact.concentration_gradient(x, y, t)
        ep = exact.pressure(x, y, t)
        epx, epy = exact.pressure_gradient(x, y, t)
        u1x_h, u1y_h = dgrad(state.u1)
        u2x_h, u2y_h = dgrad(state.u2)
        cx_h, cy_h = dgrad(state.c)
        px_h, py_h = dgrad(state.p)
        yield {
            "u1": eu1 - interp(state.u1),
            "u2": eu2 - interp(state.u2),
            "u1x": eu1x - u1x_h,
            "u1y": eu1y - u1y_h,
            "u2x": eu2x - u2x_h,
            "u2y": eu2y - u2y_h,
            "c": ec - interp(state.c),
            "cx": ecx - cx_h,
            "cy": ecy - cy_h,
            "p": ep - interp(state.p),
            "px": epx - px_h,
            "py": epy - py_h,
        }


def _quad_weights(mesh: Mesh) -> np.ndarray:
    rule = quadrature_rule(5)
    return 2.0 * mesh.areas[:, None] * rule.weights[None, :]


def error_report(
    mesh: Mesh, states: list[FieldState], exact, dt: float, theta: float
) -> ErrorReport:
    """All three error norms of a computed time series against ``exact``."""
    if len(states) < 2:
        raise ValueError("need at least two time levels to evaluate the norms")
    acc = _NormAccumulator(_quad_weights(mesh), dt, theta)
    for level in _exact_error_levels(mesh, states, exact):
        acc.add_level(level)
    return acc.report()


def m_norm_error(
    mesh: Mesh,
    states: list[FieldState],
    exact,
    dt: float,
    theta: float,
    field: str = "velocity",
) -> float:
    """Composite space-time norm of the velocity or concentration error."""
    rep = error_report(mesh, states, exact, dt, theta)
    if field == "velocity":
        return rep.e_u
    if field == "concentration":
        return rep.e_c
    raise ValueError(f"unknown field {field!r}")


def n_norm_error(
    mesh: Mesh, states: list[FieldState], exact, dt: float, theta: float
) -> float:
    """Discrete L2(L2) norm of the pressure error (single dt factor)."""
    return error_report(mesh, states, exact, dt, theta).e_p_l2


def error_report_vs_reference(
    mesh: Mesh,
    states: list[FieldState],
    reference: list[FieldState],
    dt: float,
    theta: float,
) -> ErrorReport:
    """Norms of the difference between two runs on the same mesh.

    ``reference`` must contain the coarse run's time levels as every
    ``stride``-th entry; both series are P1 on the same mesh, so all the
    integrals reduce to exact quadratic forms of nodal differences.
    """
    if (len(reference) - 1) % (len(states) - 1) != 0:
        raise ValueError("reference levels are not a multiple of the coarse levels")
    stride = (len(reference) - 1) // (len(states) - 1)
    conn = mesh.elements
    area = mesh.areas
    gx, gy = mesh.grads[:, :, 0], mesh.grads[:, :, 1]

    def l2sq(nodal):
        loc = nodal[conn]
        return float(np.sum(area / 12.0 * (loc.sum(axis=1) ** 2 + (loc**2).sum(axis=1))))

    def gradsq(nodal):
        loc = nodal[conn]
        dx = np.einsum("ei,ei->e", loc, gx)
        dy = np.einsum("ei,ei->e", loc, gy)
        return float(np.sum(area * (dx**2 + dy**2)))

    a, b = _theta_weights(theta)
    diffs = [
        {"u1": ref.u1 - st.u1, "u2": ref.u2 - st.u2, "c": ref.c - st.c}
        for st, ref in zip(states, reference[::stride])
    ]
    # the discrete pressure represents the step's effective pressure, so its
    # evaluation time depends on the step size; the theta combination of each
    # series' own consecutive levels lines both up on the common level times.
    # Level 0 keeps its stored (initial, unshifted) pressure on both series.
    def level_pressures(series):
        reps = [a * nxt.p + b * cur.p for cur, nxt in zip(series[:-1], series[1:])]
        if theta != 1.0:
            reps[0] = series[0].p
        return reps

    p_coarse = level_pressures(states)
    p_ref = level_pressures(reference)
    if theta == 1.0:
        p_pairs = [(pc, p_ref[(k + 1) * stride - 1]) for k, pc in enumerate(p_coarse)]
    else:
        p_pairs = [(pc, p_ref[k * stride]) for k, pc in enumerate(p_coarse)]

    max_u = max(l2sq(d["u1"]) + l2sq(d["u2"]) for d in diffs)
    max_c = max(l2sq(d["c"]) for d in diffs)
    sum_u = sum_c = sum_p = sum_p_l2 = max_p = 0.0
    for prev, cur in zip(diffs[:-1], diffs[1:]):
        combo = {k: a * cur[k] + b * prev[k] for k in cur}
        sum_u += dt * (
            l2sq(combo["u1"]) + l2sq(combo["u2"]) + gradsq(combo["u1"]) + gradsq(combo["u2"])
        )
        sum_c += dt * (l2sq(combo["c"]) + gradsq(combo["c"]))
    for pc, pr in p_pairs:
        dp = pr - pc
        val = l2sq(dp)
        max_p = max(max_p, val)
        sum_p += dt * (val + gradsq(dp))
        sum_p_l2 += dt * val
    return ErrorReport(
        e_u=float(np.sqrt(max_u + sum_u)),
        e_c=float(np.sqrt(max_c + sum_c)),
        e_p=float(np.sqrt(max_p + sum_p)),
        e_p_l2=float(np.sqrt(sum_p_l2)),
    )


def run_level(n: int, dt: float, cfg: SolverConfig, params) -> ErrorReport:
    """Solve one refinement level and measure its errors."""
    mesh = build_unit_square_mesh(n)
    level_cfg = replace(cfg, dt=dt)
    states, _ = run(level_cfg, params, mesh)
    return error_report(mesh, states, model.EXACT, dt, level_cfg.theta)


def run_states(n: int, dt: float, cfg: SolverConfig, params) -> list[FieldState]:
    """Solve one configuration and return the full time series."""
    mesh = build_unit_square_mesh(n)
    states, _ = run(replace(cfg, dt=dt), params, mesh)
    return states


def temporal_slope(
    n: int,
    dts: list[float],
    ref_dt: float,
    cfg: SolverConfig,
    params,
    runs: dict | None = None,
) -> float:
    """Observed time-convergence order on a fixed mesh.

    Each coarse run is compared against a fine-step reference on the same
    mesh in the total norm; the slope is the least-squares fit of
    log2(error) against log2(dt).  ``runs`` may carry precomputed state
    series keyed by dt (including ref_dt) to reuse work.
    """
    mesh = build_unit_square_mesh(n)
    runs = {} if runs is None else dict(runs)
    for step_size in [ref_dt, *dts]:
        if step_size not in runs:
            runs[step_size] = run_states(n, step_size, cfg, params)
    reference = runs[ref_dt]
    errors = []
    for step_size in dts:
        rep = error_report_vs_reference(
            mesh, runs[step_size], reference, step_size, cfg.theta
        )
        # value-based pressure part: the pressure stabilization weight itself
        # depends on dt, and its gradient-level noise would mask the
        # time-discretization order being measured here
        errors.append(float(np.sqrt(rep.e_u**2 + rep.e_c**2 + rep.e_p_l2**2)))
    slope, _ = np.polyfit(np.log2(dts), np.log2(errors), 1)
    return float(slope)


def rates_from_errors(errors: list[float]) -> list[float | None]:
    """log2 ratios between successive simultaneous (h, dt) refinements."""
    rates: list[float | None] = [None]
    for coarse, fine in zip(errors[:-1], errors[1:]):
        rates.append(float(np.log2(coarse / fine)))
    return rates


def _rows_from_reports(levels, reports) -> list[ConvergenceRow]:
    cols = {
        "e_u": [r.e_u for r in reports],
        "e_c": [r.e_c for r in reports],
        "e_p": [r.e_p for r in reports],
        "total": [r.total for r in reports],
    }
    rates = {k: rates_from_errors(v) for k, v in cols.items()}
    rows = []
    for i, (n, dt) in enumerate(levels):
        rows.append(
            ConvergenceRow(
                dt=dt,
                inv_h=n,
                e_u=cols["e_u"][i],
                roc_u=rates["e_u"][i],
                e_c=cols["e_c"][i],
                roc_c=rates["e_c"][i],
                e_p=cols["e_p"][i],
                roc_p=rates["e_p"][i],
                total=cols["total"][i],
                roc_total=rates["total"][i],
            )
        )
    return rows


def convergence_study(
    levels: list[tuple[int, float]],
    cfg: SolverConfig,
    params,
    workers: int | None = None,
) -> list[ConvergenceRow]:
    """Run the solver at each (n, dt) level and tabulate errors and rates.

    Levels are independent solves and may run in worker processes
    (``workers`` > 1); rows always come back in level order.  If a level
    fails, raises :class:`StudyAborted` carrying the rows completed so far.
    """
    reports: list[ErrorReport] = []
    if workers is not None and workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_level, n, dt, cfg, params) for n, dt in levels]
            for i, fut in enumerate(futures):
                try:
                    reports.append(fut.result())
                except SolverError as exc:
                    for other in futures[i + 1 :]:
                        other.cancel()
                    raise StudyAborted(exc, _rows_from_reports(levels[:i], reports))
    else:
        for i, (n, dt) in enumerate(levels):
            try:
                reports.append(run_level(n, dt, cfg, params))
            except SolverError as exc:
                raise StudyAborted(exc, _rows_from_reports(levels[:i], reports))
    return _rows_from_reports(levels, reports)


CSV_COLUMNS = (
    "dt",
    "inv_h",
    "e_u",
    "roc_u",
    "e_c",
    "roc_c",
    "e_p",
    "roc_p",
    "total",
    "roc_total",
)


def _fmt(value) -> str:
    if value is None:
        return ""
    return f"{value:.6e}"


def write_csv(rows: list[ConvergenceRow], path) -> None:
    """Emit the convergence table; scientific notation, header mandatory."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow(
                [
                    _fmt(r.dt),
                    str(r.inv_h),
                    _fmt(r.e_u),
                    _fmt(r.roc_u),
                    _fmt(r.e_c),
                    _fmt(r.roc_c),
                    _fmt(r.e_p),
                    _fmt(r.roc_p),
                    _fmt(r.total),
                    _fmt(r.roc_total),
                ]
            )


def read_csv(path) -> list[ConvergenceRow]:
    """Parse a table written by :func:`write_csv`.

    Values carry the file's printed precision, so read(write(rows)) equals
    the emitted numbers and re-writing reproduces the file byte for byte.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {header!r}")
        for rec in reader:
            vals = [None if v == "" else float(v) for v in rec]
            rows.append(
                ConvergenceRow(
                    dt=vals[0],
                    inv_h=int(rec[1]),
                    e_u=vals[2],
                    roc_u=vals[3],
                    e_c=vals[4],
                    roc_c=vals[5],
                    e_p=vals[6],
                    roc_p=vals[7],
                    total=vals[8],
                    roc_total=vals[9],
                )
            )
    return rows


def write_vtk(mesh: Mesh, state: FieldState, path) -> None:
    """Legacy ASCII VTK unstructured grid with point data u1, u2, p, c."""
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 2.0\n")
        fh.write(f"stabflow fields at t={state.t:.6g}\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_nodes} double\n")
        for x, y in mesh.nodes:
            fh.write(f"{x:.12e} {y:.12e} 0.0\n")
        fh.write(f"CELLS {mesh.n_el} {4 * mesh.n_el}\n")
        for tri in mesh.elements:
            fh.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n")
        fh.write(f"CELL_TYPES {mesh.n_el}\n")
        fh.writelines("5\n" for _ in range(mesh.n_el))
        fh.write(f"POINT_DATA {mesh.n_nodes}\n")
        for name, values in (
            ("u1", state.u1),
            ("u2", state.u2),
            ("p", state.p),
            ("c", state.c),
        ):
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            fh.writelines(f"{v:.12e}\n" for v in values)
