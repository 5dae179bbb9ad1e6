"""Coupled time-stepping solver for flow plus solute transport.

One time step solves the monolithic 4-field system (u1, u2, p, c) by
Picard iteration: advection velocity, viscosity and the stabilization
parameters are frozen at the current iterate, the linearized system is
assembled and solved, and the loop repeats until the relative increment
drops below tolerance.  The stabilized variants add residual-based
subscale terms; the dynamic variant additionally carries the subscale
state across steps.

Unknown layout: one block per field, node-major inside each block, so the
global vector is [u1 | u2 | p | c] of length 4*n_nodes.  Homogeneous
Dirichlet rows/columns for u1, u2, c are removed from the solved system;
pressure is kept everywhere and shifted to zero mean after each solve.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import model
from .fem import quadrature_rule
from .mesh import Mesh
from .stab import (
    StabConsts,
    SubscaleField,
    SubscaleResidual,
    compute_tau,
    time_modify_tau,
    update_subscales,
)

METHODS = ("galerkin", "asgs-static", "asgs-dynamic")


class SolverError(RuntimeError):
    """Base class for runtime solver failures."""


class AssemblyBreakdownError(SolverError):
    """Non-finite value produced during assembly."""

    def __init__(self, term: str, element: int):
        super().__init__(f"non-finite value in term {term!r} at element {element}")
        self.term = term
        self.element = element

    def __reduce__(self):
        return (type(self), (self.term, self.element))


class LinearSolveError(SolverError):
    """Linear solve failed to reach the requested relative residual."""

    def __init__(self, achieved: float, required: float):
        super().__init__(
            f"linear solve reached relative residual {achieved:.3e}"
            f" (required {required:.3e})"
        )
        self.achieved = achieved
        self.required = required

    def __reduce__(self):
        return (type(self), (self.achieved, self.required))


class PicardDivergenceError(SolverError):
    """Picard loop exhausted its iteration budget."""

    def __init__(self, history: list[float], limit: int):
        super().__init__(
            f"Picard iteration did not converge within {limit} iterations;"
            f" last increments {[f'{h:.2e}' for h in history[-4:]]}"
        )
        self.history = history
        self.limit = limit

    def __reduce__(self):
        return (type(self), (self.history, self.limit))


@dataclass
class FieldState:
    """Nodal coefficients of all four fields at one time level."""

    u1: np.ndarray
    u2: np.ndarray
    p: np.ndarray
    c: np.ndarray
    t: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.u1, self.u2, self.p, self.c])

    def copy(self) -> "FieldState":
        return FieldState(
            self.u1.copy(), self.u2.copy(), self.p.copy(), self.c.copy(), self.t
        )


@dataclass
class SolverConfig:
    method: str = "asgs-dynamic"
    theta: float = 1.0
    dt: float = 0.1
    t_final: float = 1.0
    picard_tol: float = 1e-8
    picard_max: int = 50
    linear_tol: float = 1e-10
    consts: StabConsts = field(default_factory=StabConsts)
    forcing: str = "manufactured"      # "manufactured" | "none"
    dm_reduce: str = "max"             # diffusivity scale in tau3: "max" | "mean"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if self.dt <= 0.0 or self.t_final <= 0.0:
            raise ValueError("dt and t_final must be positive")
        if self.picard_tol <= 0.0 or self.linear_tol <= 0.0:
            raise ValueError("tolerances must be positive")
        if self.picard_max < 1:
            raise ValueError("picard_max must be at least 1")
        if self.forcing not in ("manufactured", "none"):
            raise ValueError(f"unknown forcing mode {self.forcing!r}")
        if self.dm_reduce not in ("max", "mean"):
            raise ValueError(f"unknown dm_reduce {self.dm_reduce!r}")


@dataclass
class LinearSystem:
    """Sparse system over the free unknowns (Dirichlet rows eliminated)."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    free: np.ndarray        # free dof indices into the full 4N layout
    n_nodes: int
    linear_tol: float

    @property
    def size(self) -> int:
        return len(self.rhs)


class _Workspace:
    """Mesh-bound scratch data reused across assemblies."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        n = mesh.n_nodes
        conn = mesh.elements
        self.conn = conn
        self.gx = mesh.grads[:, :, 0]
        self.gy = mesh.grads[:, :, 1]
        self.area = mesh.areas

        self.r2 = quadrature_rule(2)
        self.r5 = quadrature_rule(5)
        corner = mesh.nodes[conn]
        self.xq2 = np.einsum("qi,eid->eqd", self.r2.points, corner)
        self.xq5 = np.einsum("qi,eid->eqd", self.r5.points, corner)
        self.w2 = 2.0 * self.area[:, None] * self.r2.weights[None, :]   # (n_el, 3)
        self.w5 = 2.0 * self.area[:, None] * self.r5.weights[None, :]   # (n_el, 7)
        self.phi2 = self.r2.points                                       # (3, 3)
        self.phi5 = self.r5.points                                       # (7, 3)
        # exact P1 mass block per element
        mref = (np.ones((3, 3)) + np.eye(3)) / 12.0
        self.mass = self.area[:, None, None] * mref[None, :, :]

        self.gdof = np.concatenate([conn + f * n for f in range(4)], axis=1)
        self.rows = np.broadcast_to(self.gdof[:, :, None], (mesh.n_el, 12, 12)).ravel()
        self.cols = np.broadcast_to(self.gdof[:, None, :], (mesh.n_el, 12, 12)).ravel()

        free_mask = np.ones(4 * n, dtype=bool)
        for f in (0, 1, 3):  # u1, u2, c carry Dirichlet data; p does not
            free_mask[f * n + mesh.boundary_nodes] = False
        self.free_mask = free_mask
        self.free = np.flatnonzero(free_mask)
        self.renumber = -np.ones(4 * n, dtype=np.int64)
        self.renumber[self.free] = np.arange(len(self.free))

        # lumped node weights: integral of the P1 hat functions
        w = np.zeros(n)
        np.add.at(w, conn.ravel(), np.repeat(self.area / 3.0, 3))
        self.node_weights = w


_IU1, _IU2, _IP, _IC = (slice(3 * f, 3 * f + 3) for f in range(4))


def _forcing_tables(ws: _Workspace, cfg: SolverConfig, params, t_n, t_next):
    """Theta-weighted forcing at both quadrature rules, fixed per step."""
    if cfg.forcing == "none":
        z2 = np.zeros(ws.xq2.shape[:2])
        z5 = np.zeros(ws.xq5.shape[:2])
        return (z5, z5, z5), (z2, z2, z2)
    a = 0.5 * (1.0 + cfg.theta)
    b = 0.5 * (1.0 - cfg.theta)

    def combine(xq):
        x, y = xq[..., 0], xq[..., 1]
        f1n, f2n, gn = model.manufactured_forcing(x, y, t_n, params)
        f1p, f2p, gp = model.manufactured_forcing(x, y, t_next, params)
        return a * f1p + b * f1n, a * f2p + b * f2n, a * gp + b * gn

    return combine(ws.xq5), combine(ws.xq2)


def _theta_blend(state_n: FieldState, iterate: FieldState, theta: float):
    a = 0.5 * (1.0 + theta)
    b = 0.5 * (1.0 - theta)
    return (
        a * iterate.u1 + b * state_n.u1,
        a * iterate.u2 + b * state_n.u2,
        a * iterate.c + b * state_n.c,
    )


def _convection_local(ws: _Workspace, u1s, u2s, rho):
    """Skew-symmetrized convection blocks (n_el, 3, 3), test i, trial j."""
    conn = ws.conn
    uq1 = np.einsum("qi,ei->eq", ws.phi2, u1s[conn])
    uq2 = np.einsum("qi,ei->eq", ws.phi2, u2s[conn])
    adv = uq1[:, :, None] * ws.gx[:, None, :] + uq2[:, :, None] * ws.gy[:, None, :]
    div = np.einsum("ei,ei->e", u1s[conn], ws.gx) + np.einsum(
        "ei,ei->e", u2s[conn], ws.gy
    )
    conv = rho * np.einsum("eq,qi,eqj->eij", ws.w2, ws.phi2, adv)
    conv += 0.5 * rho * div[:, None, None] * ws.mass
    return conv, adv, uq1, uq2, div


def convection_matrix(mesh: Mesh, u1: np.ndarray, u2: np.ndarray, rho: float = 1.0):
    """Global matrix of the skew-symmetrized convection form for one scalar
    component; used by the skew-symmetry checks."""
    ws = _Workspace(mesh)
    conv, *_ = _convection_local(ws, np.asarray(u1, float), np.asarray(u2, float), rho)
    rows = np.broadcast_to(ws.conn[:, :, None], conv.shape).ravel()
    cols = np.broadcast_to(ws.conn[:, None, :], conv.shape).ravel()
    return sp.coo_matrix(
        (conv.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    ).tocsr()


def _element_taus(ws, cfg, params, u1s, u2s, cs, d1q, d2q, dt):
    """Per-element stabilization parameters from the frozen iterate.

    The viscosity entering tau1/tau2 is the pointwise power-law value; for
    shear-thinning exponents its shear invariant is additionally floored at
    the flow's mean shear, otherwise stagnating elements drive the local
    viscosity towards the zero-shear blow-up, tau1 towards zero, and the
    pressure block towards singularity.
    """
    conn = ws.conn
    u1bar = u1s[conn].mean(axis=1)
    u2bar = u2s[conn].mean(axis=1)
    speed = np.hypot(u1bar, u2bar)
    g_u1 = np.stack(
        [np.einsum("ei,ei->e", u1s[conn], ws.gx), np.einsum("ei,ei->e", u1s[conn], ws.gy)],
        axis=1,
    )
    g_u2 = np.stack(
        [np.einsum("ei,ei->e", u2s[conn], ws.gx), np.einsum("ei,ei->e", u2s[conn], ws.gy)],
        axis=1,
    )
    cbar = cs[conn].mean(axis=1)
    gamma = model.shear_rate_invariant(
        g_u1[:, 0], g_u1[:, 1], g_u2[:, 0], g_u2[:, 1]
    )
    floor = params.shear_floor
    if params.power_index < 1.0:
        floor = max(floor, float(np.sum(ws.area * gamma)))
    eta0 = model.viscosity_from_invariant(cbar, np.maximum(gamma, floor), params)
    stacked = np.concatenate([d1q, d2q], axis=1)
    d_m = stacked.max(axis=1) if cfg.dm_reduce == "max" else stacked.mean(axis=1)
    taus = compute_tau(
        ws.mesh.edge_h, speed, eta0, params.rho, d_m, params.alpha, cfg.consts
    )
    if cfg.method == "asgs-dynamic":
        taus = time_modify_tau(taus, dt, params.rho)
    return taus, g_u1, g_u2


def assemble(
    mesh: Mesh,
    state_n: FieldState,
    iterate: FieldState,
    subscales_n: SubscaleField,
    cfg: SolverConfig,
    params: model.PhysicalParams,
    workspace: _Workspace | None = None,
    forcing=None,
    taus=None,
) -> LinearSystem:
    """Linearized system for the next Picard iterate.

    ``iterate`` supplies the frozen advection velocity and viscosity
    (theta-blended with ``state_n`` so the Crank-Nicolson branch stays
    second order; for backward Euler the blend is the iterate itself).
    The stabilization parameters are recomputed from the same blend unless
    ``taus`` is given; the time loop evaluates them once per step from the
    step-start fields, which keeps the Picard map contractive (tau reacts
    strongly to the velocity where the flow nearly stagnates).  For the
    stabilized methods the subscale update formula is substituted into the
    coarse-scale equations, so the system involves coarse unknowns only.
    """
    ws = workspace if workspace is not None else _Workspace(mesh)
    n = mesh.n_nodes
    n_el = mesh.n_el
    dt = cfg.dt
    t_n = state_n.t
    t_next = t_n + dt
    a = 0.5 * (1.0 + cfg.theta)
    b = 0.5 * (1.0 - cfg.theta)
    rho = params.rho
    alpha = params.alpha
    conn = ws.conn
    gx, gy, area = ws.gx, ws.gy, ws.area

    if forcing is None:
        forcing = _forcing_tables(ws, cfg, params, t_n, t_next)
    (f1_5, f2_5, g_5), (f1_2, f2_2, g_2) = forcing

    u1s, u2s, cs = _theta_blend(state_n, iterate, cfg.theta)

    # diffusivities at the 3-point rule, theta-weighted in time
    x2, y2 = ws.xq2[..., 0], ws.xq2[..., 1]
    d1n, d2n = model.diffusion_coeffs(x2, y2, t_n, params.diffusion_mode)
    d1p, d2p = model.diffusion_coeffs(x2, y2, t_next, params.diffusion_mode)
    d1q = a * d1p + b * d1n
    d2q = a * d2p + b * d2n

    conv, adv, _, _, _ = _convection_local(ws, u1s, u2s, rho)

    # element-integrated power-law viscosity (7-point rule, eta is not
    # polynomial) -- the velocity-gradient part is constant per element
    g_u1 = np.stack(
        [np.einsum("ei,ei->e", u1s[conn], gx), np.einsum("ei,ei->e", u1s[conn], gy)],
        axis=1,
    )
    g_u2 = np.stack(
        [np.einsum("ei,ei->e", u2s[conn], gx), np.einsum("ei,ei->e", u2s[conn], gy)],
        axis=1,
    )
    cq5 = np.einsum("qi,ei->eq", ws.phi5, cs[conn])
    eta5 = model.viscosity_from_parts(
        cq5,
        g_u1[:, 0:1],
        g_u1[:, 1:2],
        g_u2[:, 0:1],
        g_u2[:, 1:2],
        params,
    )
    etabar = np.einsum("eq,eq->e", ws.w5, eta5)
    if not np.all(np.isfinite(etabar)):
        raise AssemblyBreakdownError("viscosity", int(np.flatnonzero(~np.isfinite(etabar))[0]))

    dbar1 = np.einsum("eq,eq->e", ws.w2, d1q)
    dbar2 = np.einsum("eq,eq->e", ws.w2, d2q)

    aloc = np.zeros((n_el, 12, 12))
    rloc = np.zeros((n_el, 12, 12))

    def outer(col, row):  # -> (n_el, 3, 3), [test i, trial j]
        return row[:, :, None] * col[:, None, :]

    # --- time mass ---
    mt_u = (rho / dt) * ws.mass
    mt_c = (1.0 / dt) * ws.mass
    for blk, m_t in ((_IU1, mt_u), (_IU2, mt_u), (_IC, mt_c)):
        aloc[:, blk, blk] += m_t
        rloc[:, blk, blk] += m_t

    # --- Galerkin spatial form K (weighted a into matrix, -b into rhs op) ---
    k_u1u1 = conv + etabar[:, None, None] * (2.0 * outer(gx, gx) + outer(gy, gy))
    k_u2u2 = conv + etabar[:, None, None] * (outer(gx, gx) + 2.0 * outer(gy, gy))
    k_u1u2 = etabar[:, None, None] * outer(gx, gy)   # trial u2, test v1
    k_u2u1 = etabar[:, None, None] * outer(gy, gx)   # trial u1, test v2
    third_area = area[:, None, None] / 3.0
    ones3 = np.ones((1, 1, 3))
    k_u1p = -third_area * gx[:, :, None] * ones3     # -b(v, p)
    k_u2p = -third_area * gy[:, :, None] * ones3
    k_pu1 = third_area * np.swapaxes(gx[:, :, None] * ones3, 1, 2)  # b(u, q)
    k_pu2 = third_area * np.swapaxes(gy[:, :, None] * ones3, 1, 2)
    nlt = np.einsum("eq,qi,eqj->eij", ws.w2, ws.phi2, adv)
    k_cc = (
        dbar1[:, None, None] * outer(gx, gx)
        + dbar2[:, None, None] * outer(gy, gy)
        + alpha * ws.mass
        + nlt
    )
    # The pressure unknown and the divergence constraint carry full weight
    # for any theta: the pressure is a Lagrange multiplier without its own
    # time dynamics and the constraint holds at the new level, which
    # suppresses the odd-even temporal modes of the averaged scheme.  For
    # backward Euler (a=1, b=0) nothing changes.
    for blk_t, blk_s, kblk, wa, wb in (
        (_IU1, _IU1, k_u1u1, a, b),
        (_IU1, _IU2, k_u1u2, a, b),
        (_IU2, _IU1, k_u2u1, a, b),
        (_IU2, _IU2, k_u2u2, a, b),
        (_IU1, _IP, k_u1p, 1.0, 0.0),
        (_IU2, _IP, k_u2p, 1.0, 0.0),
        (_IP, _IU1, k_pu1, 1.0, 0.0),
        (_IP, _IU2, k_pu2, 1.0, 0.0),
        (_IC, _IC, k_cc, a, b),
    ):
        aloc[:, blk_t, blk_s] += wa * kblk
        rloc[:, blk_t, blk_s] -= wb * kblk

    # --- load vector (7-point rule; the forcing carries the power-law
    # viscosity divergence) ---
    rvec = np.zeros((n_el, 12))
    rvec[:, _IU1] += np.einsum("eq,eq,qi->ei", ws.w5, f1_5, ws.phi5)
    rvec[:, _IU2] += np.einsum("eq,eq,qi->ei", ws.w5, f2_5, ws.phi5)
    rvec[:, _IC] += np.einsum("eq,eq,qi->ei", ws.w5, g_5, ws.phi5)

    if cfg.method != "galerkin":
        dynamic = cfg.method == "asgs-dynamic"
        if taus is None:
            taus, _, _ = _element_taus(ws, cfg, params, u1s, u2s, cs, d1q, d2q, dt)
        t1 = taus.tau1_prime if dynamic else taus.tau1
        t2 = taus.tau2
        t3 = taus.tau3_prime if dynamic else taus.tau3
        if not (np.all(np.isfinite(t1)) and np.all(np.isfinite(t2)) and np.all(np.isfinite(t3))):
            bad = ~(np.isfinite(t1) & np.isfinite(t2) & np.isfinite(t3))
            raise AssemblyBreakdownError("stabilization parameters", int(np.flatnonzero(bad)[0]))

        phi = ws.phi2                      # (q, i)
        w2 = ws.w2                         # (e, q)
        # trial-side operators at quadrature points, (e, q, j)
        madv = rho * adv                   # momentum convection rho*(u.grad)phi_j
        cadv = adv                         # transport convection
        # momentum rows: weight tau1; tests rho*adv_i (velocity) and grad psi_i
        # (pressure); trials: time mass, convection and pressure gradient.
        w_t1 = t1[:, None] * w2
        w_t3 = t3[:, None] * w2
        # The discrete time derivative enters the subscale residual only for
        # dynamic subscales; the quasi-static variant carries the spatial
        # residual of its steady-subscale origin and thereby loses transient
        # consistency (the accuracy gap the dynamic method closes).
        mass_on = 1.0 if dynamic else 0.0
        # (W * trial)(q, j) pieces
        trial_mass_u = mass_on * (rho / dt) * phi[None, :, :] * np.ones((n_el, 1, 1))
        trial_conv_u = madv
        trial_c = mass_on * (1.0 / dt) * phi[None, :, :] + a * (
            cadv + alpha * phi[None, :, :]
        )
        test_c = cadv - alpha * phi[None, :, :]

        def contract(wq, trial, test):
            return np.einsum("eq,eqj,eqi->eij", wq, trial, test)

        # velocity-test couplings (rows u1/u2)
        smat_uu = contract(w_t1, trial_mass_u + a * trial_conv_u, madv)
        rmat_uu = contract(w_t1, trial_mass_u - b * trial_conv_u, madv)
        # pressure-trial against velocity tests: grad p enters rows 1 and 2
        gxq = np.broadcast_to(gx[:, None, :], adv.shape)
        gyq = np.broadcast_to(gy[:, None, :], adv.shape)
        s_u1p = contract(w_t1, gxq, madv)
        s_u2p = contract(w_t1, gyq, madv)
        # pressure-test couplings (PSPG-like)
        s_pu_mass = contract(w_t1, trial_mass_u, gxq), contract(w_t1, trial_mass_u, gyq)
        s_pu_conv = contract(w_t1, trial_conv_u, gxq), contract(w_t1, trial_conv_u, gyq)
        s_pp = contract(w_t1, gxq, gxq) + contract(w_t1, gyq, gyq)
        # grad-div (tau2) couplings
        t2a = (t2 * area)[:, None, None]
        gd_11 = t2a * outer(gx, gx)   # test v1, trial u1
        gd_12 = t2a * outer(gy, gx)   # test v1, trial u2
        gd_21 = t2a * outer(gx, gy)   # test v2, trial u1
        gd_22 = t2a * outer(gy, gy)   # test v2, trial u2
        # transport (tau3)
        s_cc = contract(w_t3, trial_c, test_c)
        r_cc = contract(
            w_t3,
            mass_on * (1.0 / dt) * phi[None, :, :] - b * (cadv + alpha * phi[None, :, :]),
            test_c,
        )

        aloc[:, _IU1, _IU1] += smat_uu + gd_11
        aloc[:, _IU2, _IU2] += smat_uu + gd_22
        aloc[:, _IU1, _IU2] += gd_12
        aloc[:, _IU2, _IU1] += gd_21
        aloc[:, _IU1, _IP] += s_u1p      # pressure trial: full weight
        aloc[:, _IU2, _IP] += s_u2p
        aloc[:, _IP, _IU1] += s_pu_mass[0] + a * s_pu_conv[0]
        aloc[:, _IP, _IU2] += s_pu_mass[1] + a * s_pu_conv[1]
        aloc[:, _IP, _IP] += s_pp
        aloc[:, _IC, _IC] += s_cc

        rloc[:, _IU1, _IU1] += rmat_uu
        rloc[:, _IU2, _IU2] += rmat_uu
        rloc[:, _IP, _IU1] += s_pu_mass[0] - b * s_pu_conv[0]
        rloc[:, _IP, _IU2] += s_pu_mass[1] - b * s_pu_conv[1]
        rloc[:, _IC, _IC] += r_cc

        # force and (dynamic) subscale-history contributions to the rhs
        hist_u1 = (rho / dt) * subscales_n.u1 if dynamic else 0.0
        hist_u2 = (rho / dt) * subscales_n.u2 if dynamic else 0.0
        hist_c = subscales_n.c / dt if dynamic else 0.0
        res1 = f1_2 + (hist_u1[:, None] if dynamic else 0.0)
        res2 = f2_2 + (hist_u2[:, None] if dynamic else 0.0)
        resc = g_2 + (hist_c[:, None] if dynamic else 0.0)
        rvec[:, _IU1] += np.einsum("eq,eq,eqi->ei", w_t1, res1, madv)
        rvec[:, _IU2] += np.einsum("eq,eq,eqi->ei", w_t1, res2, madv)
        rvec[:, _IP] += np.einsum("eq,eq,eqi->ei", w_t1, res1, gxq)
        rvec[:, _IP] += np.einsum("eq,eq,eqi->ei", w_t1, res2, gyq)
        rvec[:, _IC] += np.einsum("eq,eq,eqi->ei", w_t3, resc, test_c)

    # right-hand side: operator applied to the previous state, plus loads
    un_loc = np.empty((n_el, 12))
    for blk, vals in ((_IU1, state_n.u1), (_IU2, state_n.u2), (_IP, state_n.p), (_IC, state_n.c)):
        un_loc[:, blk] = vals[conn]
    rvec += np.einsum("eab,eb->ea", rloc, un_loc)

    if not np.all(np.isfinite(aloc)):
        bad = ~np.isfinite(aloc).all(axis=(1, 2))
        raise AssemblyBreakdownError("system matrix", int(np.flatnonzero(bad)[0]))
    if not np.all(np.isfinite(rvec)):
        bad = ~np.isfinite(rvec).all(axis=1)
        raise AssemblyBreakdownError("right-hand side", int(np.flatnonzero(bad)[0]))

    rhs_full = np.zeros(4 * n)
    np.add.at(rhs_full, ws.gdof.ravel(), rvec.ravel())

    data = aloc.ravel()
    keep = ws.free_mask[ws.rows] & ws.free_mask[ws.cols]
    matrix = sp.coo_matrix(
        (data[keep], (ws.renumber[ws.rows[keep]], ws.renumber[ws.cols[keep]])),
        shape=(len(ws.free), len(ws.free)),
    ).tocsr()
    return LinearSystem(
        matrix=matrix,
        rhs=rhs_full[ws.free],
        free=ws.free,
        n_nodes=n,
        linear_tol=cfg.linear_tol,
    )


def solve_linear(system: LinearSystem) -> np.ndarray:
    """Solve the assembled system to the configured relative residual.

    The matrix is row-equilibrated before a sparse LU factorization and the
    solution polished with a few iterative-refinement sweeps; the fields
    carry wildly different scales (density-weighted mass terms against
    h^2-sized stabilization blocks), which plain LU cannot absorb.  If the
    factorization fails or stalls (the pure Galerkin pressure block can be
    singular), falls back to deterministic LSMR.  Raises
    :class:`LinearSolveError` when neither route reaches the tolerance.
    """
    b = system.rhs
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)

    # two-sided (Ruiz) equilibration; the coefficient contrast of the
    # power-law viscosity can push the raw condition number past what a
    # plain factorization resolves at the requested tolerance
    a = system.matrix.tocsr()
    m = a
    d_row = np.ones(a.shape[0])
    d_col = np.ones(a.shape[0])
    for _ in range(2):
        rmax = np.abs(m).max(axis=1).toarray().ravel()
        rmax[rmax == 0.0] = 1.0
        r = 1.0 / np.sqrt(rmax)
        m = sp.diags(r) @ m
        d_row *= r
        cmax = np.abs(m).max(axis=0).toarray().ravel()
        cmax[cmax == 0.0] = 1.0
        c = 1.0 / np.sqrt(cmax)
        m = m @ sp.diags(c)
        d_col *= c
    a_eq = m.tocsc()

    def residual(x):
        return np.linalg.norm(a @ x - b) / bnorm

    x = None
    try:
        lu = spla.splu(a_eq)
        x = d_col * lu.solve(d_row * b)
        for _ in range(4):
            if np.all(np.isfinite(x)) and residual(x) <= system.linear_tol:
                return x
            x = x + d_col * lu.solve(d_row * (b - a @ x))
        if np.all(np.isfinite(x)) and residual(x) <= system.linear_tol:
            return x
    except RuntimeError:
        x = None
    out = spla.lsmr(
        a_eq, d_row * b, atol=0.0, btol=0.0, conlim=0.0, maxiter=20 * system.size
    )
    x_ls = d_col * out[0]
    if residual(x_ls) <= system.linear_tol:
        return x_ls
    best = x_ls if x is None or not np.all(np.isfinite(x)) else min((x, x_ls), key=residual)
    raise LinearSolveError(residual(best), system.linear_tol)


def _scatter_state(system: LinearSystem, x: np.ndarray, t: float) -> FieldState:
    full = np.zeros(4 * system.n_nodes)
    full[system.free] = x
    n = system.n_nodes
    return FieldState(full[:n], full[n : 2 * n], full[2 * n : 3 * n], full[3 * n :], t)


def _node_weights(mesh: Mesh) -> np.ndarray:
    w = np.zeros(mesh.n_nodes)
    np.add.at(w, mesh.elements.ravel(), np.repeat(mesh.areas / 3.0, 3))
    return w


def shift_pressure_mean(mesh_or_weights, state: FieldState) -> None:
    """Shift p to zero mean over the domain (the pressure gauge)."""
    w = (
        mesh_or_weights
        if isinstance(mesh_or_weights, np.ndarray)
        else _node_weights(mesh_or_weights)
    )
    state.p -= (w @ state.p) / w.sum()


def _barycenter_residual(
    ws: _Workspace, state_n, state_new, cfg, params, forcing, include_time: bool
) -> SubscaleResidual:
    """Strong residual of the converged step at element barycenters.

    Second derivatives of P1 fields vanish on element interiors, so the
    viscous and diffusive operators drop out.  ``include_time`` matches the
    assembly: the quasi-static subscales see the spatial residual only.
    """
    conn = ws.conn
    a = 0.5 * (1.0 + cfg.theta)
    b = 0.5 * (1.0 - cfg.theta)
    dt = cfg.dt
    rho = params.rho
    u1s, u2s, cs = _theta_blend(state_n, state_new, cfg.theta)
    u1bar = u1s[conn].mean(axis=1)
    u2bar = u2s[conn].mean(axis=1)

    (_, _, _), (f1_2, f2_2, g_2) = forcing
    fbar1 = f1_2.mean(axis=1)  # barycenter value of a linear field equals the
    fbar2 = f2_2.mean(axis=1)  # midpoint average; for the forcing this is an
    gbar = g_2.mean(axis=1)    # adequate sample at the same points used above

    def grad(nodal):
        return (
            np.einsum("ei,ei->e", nodal[conn], ws.gx),
            np.einsum("ei,ei->e", nodal[conn], ws.gy),
        )

    def conv_theta(nodal_new, nodal_old):
        gxn, gyn = grad(nodal_new)
        gxo, gyo = grad(nodal_old)
        return a * (u1bar * gxn + u2bar * gyn) + b * (u1bar * gxo + u2bar * gyo)

    adv_u1 = conv_theta(state_new.u1, state_n.u1)
    adv_u2 = conv_theta(state_new.u2, state_n.u2)
    adv_c = conv_theta(state_new.c, state_n.c)
    px_new, py_new = grad(state_new.p)

    def bary(nodal):
        return nodal[conn].mean(axis=1)

    mass_on = 1.0 if include_time else 0.0
    r_u1 = (
        fbar1
        - mass_on * rho * (bary(state_new.u1) - bary(state_n.u1)) / dt
        - rho * adv_u1
        - px_new
    )
    r_u2 = (
        fbar2
        - mass_on * rho * (bary(state_new.u2) - bary(state_n.u2)) / dt
        - rho * adv_u2
        - py_new
    )
    gx1n, _ = grad(state_new.u1)
    _, gy2n = grad(state_new.u2)
    r_div = -(gx1n + gy2n)
    r_c = (
        gbar
        - mass_on * (bary(state_new.c) - bary(state_n.c)) / dt
        - adv_c
        - params.alpha * (a * bary(state_new.c) + b * bary(state_n.c))
    )
    return SubscaleResidual(u1=r_u1, u2=r_u2, div=r_div, c=r_c)


def step(
    mesh: Mesh,
    state_n: FieldState,
    subscales_n: SubscaleField,
    cfg: SolverConfig,
    params: model.PhysicalParams,
    t_next: float,
    workspace: _Workspace | None = None,
):
    """Advance one time step; returns (state, subscales, picard_iterations)."""
    ws = workspace if workspace is not None else _Workspace(mesh)
    if abs(t_next - (state_n.t + cfg.dt)) > 1e-9 * max(1.0, abs(t_next)):
        raise ValueError("t_next is not one time step after the current state")
    forcing = _forcing_tables(ws, cfg, params, state_n.t, t_next)

    taus = None
    if cfg.method != "galerkin":
        # stabilization parameters once per step, from the step-start state
        x2, y2 = ws.xq2[..., 0], ws.xq2[..., 1]
        a = 0.5 * (1.0 + cfg.theta)
        b = 0.5 * (1.0 - cfg.theta)
        d1n, d2n = model.diffusion_coeffs(x2, y2, state_n.t, params.diffusion_mode)
        d1p, d2p = model.diffusion_coeffs(x2, y2, t_next, params.diffusion_mode)
        taus, _, _ = _element_taus(
            ws, cfg, params, state_n.u1, state_n.u2, state_n.c,
            a * d1p + b * d1n, a * d2p + b * d2n, cfg.dt,
        )

    iterate = state_n.copy()
    iterate.t = t_next
    history: list[float] = []
    converged = False
    for _ in range(cfg.picard_max):
        system = assemble(
            mesh, state_n, iterate, subscales_n, cfg, params,
            workspace=ws, forcing=forcing, taus=taus,
        )
        x = solve_linear(system)
        new = _scatter_state(system, x, t_next)
        shift_pressure_mean(ws.node_weights, new)
        new_vec = new.as_vector()
        inc = np.linalg.norm(new_vec - iterate.as_vector())
        denom = np.linalg.norm(new_vec)
        rel = inc / denom if denom > 0.0 else 0.0
        history.append(rel)
        iterate = new
        if rel <= cfg.picard_tol:
            converged = True
            break
    if not converged:
        raise PicardDivergenceError(history, cfg.picard_max)

    if cfg.method == "galerkin":
        new_subscales = SubscaleField.zeros(mesh.n_el)
    else:
        dynamic = cfg.method == "asgs-dynamic"
        residual = _barycenter_residual(
            ws, state_n, iterate, cfg, params, forcing, include_time=dynamic
        )
        mode = "dynamic" if dynamic else "quasi_static"
        new_subscales = update_subscales(
            subscales_n, residual, taus, cfg.dt, params.rho, mode
        )
    return iterate, new_subscales, len(history)


def initial_state(mesh: Mesh) -> FieldState:
    """Nodal interpolation of the exact solution at t=0."""
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    u1, u2 = model.EXACT.velocity(x, y, 0.0)
    p = model.EXACT.pressure(x, y, 0.0)
    c = model.EXACT.concentration(x, y, 0.0)
    state = FieldState(u1, u2, np.asarray(p), c, t=0.0)
    for arr in (state.u1, state.u2, state.c):
        arr[mesh.boundary_nodes] = 0.0
    shift_pressure_mean(mesh, state)
    return state


def run(cfg: SolverConfig, params: model.PhysicalParams, mesh: Mesh):
    """Run the time loop; returns (states for t=0..T, final subscales)."""
    n_steps_f = cfg.t_final / cfg.dt
    n_steps = int(round(n_steps_f))
    if abs(n_steps_f - n_steps) > 1e-9:
        raise ValueError(
            f"t_final/dt = {n_steps_f} is not an integer number of steps"
        )
    ws = _Workspace(mesh)
    state = initial_state(mesh)
    subscales = SubscaleField.zeros(mesh.n_el)
    states = [state]
    for k in range(n_steps):
        state, subscales, _ = step(
            mesh, state, subscales, cfg, params, (k + 1) * cfg.dt, workspace=ws
        )
        states.append(state)
    return states, subscales
