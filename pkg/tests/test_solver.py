import numpy as np
import pytest
import scipy.sparse as sp

from stabflow import model, solver
from stabflow.mesh import build_unit_square_mesh
from stabflow.solver import (
    AssemblyBreakdownError,
    FieldState,
    LinearSolveError,
    LinearSystem,
    PicardDivergenceError,
    SolverConfig,
    assemble,
    convection_matrix,
    initial_state,
    run,
    shift_pressure_mean,
    solve_linear,
    step,
)
from stabflow.stab import SubscaleField, TauSet


def exact_state(mesh, t):
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    u1, u2 = model.EXACT.velocity(x, y, t)
    st = FieldState(
        np.asarray(u1),
        np.asarray(u2),
        np.asarray(model.EXACT.pressure(x, y, t)),
        np.asarray(model.EXACT.concentration(x, y, t)),
        t,
    )
    for arr in (st.u1, st.u2, st.c):
        arr[mesh.boundary_nodes] = 0.0
    shift_pressure_mean(mesh, st)
    return st


def l2sq(mesh, nodal):
    loc = nodal[mesh.elements]
    return float(
        np.sum(mesh.areas / 12.0 * (loc.sum(axis=1) ** 2 + (loc**2).sum(axis=1)))
    )


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(method="supg")
        with pytest.raises(ValueError):
            SolverConfig(theta=1.5)
        with pytest.raises(ValueError):
            SolverConfig(dt=0.0)
        with pytest.raises(ValueError):
            SolverConfig(picard_max=0)
        with pytest.raises(ValueError):
            SolverConfig(forcing="random")


class TestLinearSolve:
    def make(self, a, b):
        return LinearSystem(
            matrix=sp.csr_matrix(np.asarray(a, dtype=float)),
            rhs=np.asarray(b, dtype=float),
            free=np.arange(len(b)),
            n_nodes=len(b),
            linear_tol=1e-10,
        )

    def test_identity(self):
        b = np.array([3.0, -1.0, 2.0])
        x = solve_linear(self.make(np.eye(3), b))
        assert np.allclose(x, b, atol=1e-14)

    def test_diagonal_two_by_two(self):
        x = solve_linear(self.make([[2.0, 0.0], [0.0, 4.0]], [2.0, 8.0]))
        assert np.allclose(x, [1.0, 2.0], atol=1e-13)

    def test_zero_rhs_returns_zero(self):
        x = solve_linear(self.make([[2.0, 1.0], [1.0, 3.0]], [0.0, 0.0]))
        assert np.all(x == 0.0)

    def test_singular_consistent_uses_least_squares(self):
        # rank-1 but consistent: LSMR reaches the tolerance
        x = solve_linear(self.make([[1.0, 0.0], [0.0, 0.0]], [2.0, 0.0]))
        assert x[0] == pytest.approx(2.0, rel=1e-10)

    def test_singular_inconsistent_raises(self):
        with pytest.raises(LinearSolveError) as err:
            solve_linear(self.make([[1.0, 0.0], [0.0, 0.0]], [1.0, 1.0]))
        assert err.value.achieved > 1e-10


class TestAssemble:
    def test_free_unknown_count(self):
        mesh = build_unit_square_mesh(10)
        s0 = exact_state(mesh, 0.0)
        cfg = SolverConfig(method="asgs-dynamic", dt=0.1)
        params = model.PhysicalParams.one_way(1000.0, 1.5)
        system = assemble(mesh, s0, s0.copy(), SubscaleField.zeros(mesh.n_el), cfg, params)
        assert system.size == 4 * 121 - 3 * 40 == 364
        assert system.matrix.shape == (364, 364)

    def test_galerkin_has_no_stabilization(self):
        # zeroed taus turn either stabilized assembly into the Galerkin one
        mesh = build_unit_square_mesh(6)
        s0 = exact_state(mesh, 0.0)
        s1 = exact_state(mesh, 0.1)
        subs = SubscaleField.zeros(mesh.n_el)
        params = model.PhysicalParams.one_way(1000.0, 1.5)
        zeros = np.zeros(mesh.n_el)
        no_tau = TauSet(
            tau1=zeros, tau2=zeros, tau3=zeros, tau1_prime=zeros, tau3_prime=zeros
        )
        sys_gal = assemble(
            mesh, s0, s1, subs, SolverConfig(method="galerkin", dt=0.1), params
        )
        for method in ("asgs-static", "asgs-dynamic"):
            sys_stab = assemble(
                mesh, s0, s1, subs, SolverConfig(method=method, dt=0.1), params,
                taus=no_tau,
            )
            diff = (sys_gal.matrix - sys_stab.matrix).toarray()
            assert np.abs(diff).max() <= 1e-13
            assert np.abs(sys_gal.rhs - sys_stab.rhs).max() <= 1e-13

    def test_consistency_residual_decays(self):
        # exact nodal data + zero subscales: the algebraic residual drops by
        # at least 1.8x when h and dt halve together
        def residual(n):
            mesh = build_unit_square_mesh(n)
            dt = 1.0 / n
            s0, s1 = exact_state(mesh, 0.0), exact_state(mesh, dt)
            params = model.PhysicalParams.one_way(1000.0, 1.5)
            cfg = SolverConfig(method="asgs-dynamic", dt=dt)
            system = assemble(mesh, s0, s1, SubscaleField.zeros(mesh.n_el), cfg, params)
            return np.linalg.norm(system.matrix @ s1.as_vector()[system.free] - system.rhs)

        r8, r16 = residual(8), residual(16)
        assert r8 / r16 >= 1.8

    def test_breakdown_reports_element(self):
        mesh = build_unit_square_mesh(4)
        s0 = exact_state(mesh, 0.0)
        bad = s0.copy()
        bad.u1[mesh.elements[7, 0]] = np.nan
        cfg = SolverConfig(method="asgs-dynamic", dt=0.1)
        params = model.PhysicalParams.one_way(1000.0, 1.5)
        with pytest.raises(AssemblyBreakdownError) as err:
            assemble(mesh, s0, bad, SubscaleField.zeros(mesh.n_el), cfg, params)
        assert err.value.element >= 0
        assert err.value.term


class TestSkewSymmetry:
    def test_convection_form_vanishes_on_test_diagonal(self):
        mesh = build_unit_square_mesh(8)
        rng = np.random.default_rng(11)
        interior = np.setdiff1d(np.arange(mesh.n_nodes), mesh.boundary_nodes)
        for trial in range(5):
            u1 = rng.normal(size=mesh.n_nodes)
            u2 = rng.normal(size=mesh.n_nodes)
            c_mat = convection_matrix(mesh, u1, u2, rho=1.0)
            v = np.zeros(mesh.n_nodes)
            v[interior] = rng.normal(size=len(interior))
            val = abs(v @ (c_mat @ v))
            unorm = np.linalg.norm(np.concatenate([u1, u2]))
            assert val <= 1e-12 * unorm * np.linalg.norm(v) ** 2


class TestStep:
    def test_zero_forcing_zero_data_fixed_point(self):
        mesh = build_unit_square_mesh(5)
        zero = FieldState(*(np.zeros(mesh.n_nodes) for _ in range(4)), t=0.0)
        cfg = SolverConfig(method="asgs-dynamic", dt=0.1, forcing="none")
        params = model.PhysicalParams.one_way(1000.0, 1.5)
        new, subs, iters = step(
            mesh, zero, SubscaleField.zeros(mesh.n_el), cfg, params, 0.1
        )
        assert iters == 1
        assert np.all(new.as_vector() == 0.0)
        assert np.all(subs.u1 == 0.0) and np.all(subs.c == 0.0)

    def test_one_step_concentration_accuracy(self):
        # reference-configuration smoke bound: one backward-Euler step from
        # exact data keeps the nodal concentration within 5e-3
        mesh = build_unit_square_mesh(10)
        cfg = SolverConfig(method="asgs-dynamic", theta=1.0, dt=0.1)
        params = model.PhysicalParams.one_way(1000.0, 1.5)
        s0 = initial_state(mesh)
        s1, _, _ = step(mesh, s0, SubscaleField.zeros(mesh.n_el), cfg, params, 0.1)
        x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
        c_exact = model.EXACT.concentration(x, y, 0.1)
        assert np.abs(s1.c - c_exact).max() <= 5e-3

    def test_newtonian_picard_no_harder_than_power_law(self):
        mesh = build_unit_square_mesh(8)
        counts = {}
        for m in (1.0, 1.5):
            params = model.PhysicalParams.one_way(1000.0, m)
            cfg = SolverConfig(method="asgs-dynamic", dt=0.1, t_final=0.3)
            state = initial_state(mesh)
            subs = SubscaleField.zeros(mesh.n_el)
            total = 0
            ws = solver._Workspace(mesh)
            for k in range(3):
                state, subs, iters = step(
                    mesh, state, subs, cfg, params, (k + 1) * cfg.dt, workspace=ws
                )
                total += iters
            counts[m] = total
        assert counts[1.0] <= counts[1.5]

    def test_rejects_misaligned_time(self):
        mesh = build_unit_square_mesh(4)
        cfg = SolverConfig(method="galerkin", dt=0.1)
        params = model.PhysicalParams.one_way(1000.0, 1.0)
        with pytest.raises(ValueError):
            step(
                mesh, initial_state(mesh), SubscaleField.zeros(mesh.n_el),
                cfg, params, 0.3,
            )

    def test_picard_divergence_carries_history(self):
        mesh = build_unit_square_mesh(6)
        cfg = SolverConfig(method="asgs-dynamic", dt=0.1, picard_max=1)
        params = model.PhysicalParams.one_way(1000.0, 1.5)
        with pytest.raises(PicardDivergenceError) as err:
            step(
                mesh, initial_state(mesh), SubscaleField.zeros(mesh.n_el),
                cfg, params, 0.1,
            )
        assert len(err.value.history) == 1


class TestRun:
    def test_state_count(self):
        mesh = build_unit_square_mesh(4)
        cfg = SolverConfig(method="asgs-dynamic", dt=0.1, t_final=1.0)
        params = model.PhysicalParams.one_way(1000.0, 1.0)
        states, _ = run(cfg, params, mesh)
        assert len(states) == 11
        assert states[0].t == 0.0
        assert states[-1].t == pytest.approx(1.0, abs=1e-12)

    def test_rejects_non_integral_step_count(self):
        mesh = build_unit_square_mesh(4)
        cfg = SolverConfig(method="galerkin", dt=0.3, t_final=1.0)
        params = model.PhysicalParams.one_way(1000.0, 1.0)
        with pytest.raises(ValueError):
            run(cfg, params, mesh)

    def test_dirichlet_and_pressure_gauge_invariants(self):
        mesh = build_unit_square_mesh(6)
        cfg = SolverConfig(method="asgs-dynamic", dt=0.2, t_final=0.6)
        params = model.PhysicalParams.one_way(1000.0, 1.5)
        states, _ = run(cfg, params, mesh)
        w = solver._node_weights(mesh)
        for st in states:
            for arr in (st.u1, st.u2, st.c):
                assert np.all(arr[mesh.boundary_nodes] == 0.0)
            assert abs(w @ st.p) <= 1e-10

    def test_galerkin_free_decay_energy_monotone(self):
        mesh = build_unit_square_mesh(8)
        cfg = SolverConfig(method="galerkin", theta=1.0, dt=0.1, t_final=1.0,
                           forcing="none")
        params = model.PhysicalParams.one_way(1000.0, 1.5)
        states, _ = run(cfg, params, mesh)
        energy = [l2sq(mesh, s.u1) + l2sq(mesh, s.u2) + l2sq(mesh, s.c) for s in states]
        for e_prev, e_next in zip(energy, energy[1:]):
            assert e_next <= e_prev * (1.0 + 1e-12)

    @pytest.mark.parametrize("method", ["galerkin", "asgs-static", "asgs-dynamic"])
    @pytest.mark.parametrize("m", [0.5, 1.0, 1.5])
    def test_free_decay_boundedness(self, method, m):
        # stability-bound oracle: coarse plus subscale energy stays within a
        # factor 10 of the initial data for all methods
        mesh = build_unit_square_mesh(8)
        cfg = SolverConfig(method=method, theta=1.0, dt=0.1, t_final=1.0,
                           forcing="none")
        params = model.PhysicalParams.one_way(1000.0, m)
        state = initial_state(mesh)
        e0 = l2sq(mesh, state.u1) + l2sq(mesh, state.u2) + l2sq(mesh, state.c)
        subs = SubscaleField.zeros(mesh.n_el)
        ws = solver._Workspace(mesh)
        worst = e0
        for k in range(10):
            state, subs, _ = step(
                mesh, state, subs, cfg, params, (k + 1) * cfg.dt, workspace=ws
            )
            sub_u, sub_c = subs.norms_squared(mesh.areas)
            total = (
                l2sq(mesh, state.u1) + l2sq(mesh, state.u2) + l2sq(mesh, state.c)
                + sub_u + sub_c
            )
            worst = max(worst, total)
        assert worst <= 10.0 * e0
