"""Assembly, Jacobians, and the nonlinear solvers."""

import numpy as np
import pytest

from psim import diagnostics, system
from psim.errors import ConfigError, MassOutOfRange, StepFailure
from psim.flux import q_value_core, sedan_flux_core
from psim.mesh import build_three_layer_mesh
from psim.physics import DimensionlessParams, RecombinationParams
from psim.scenario import make_scenario
from psim.system import Layout, NewtonOptions, State, TimeGrid


def scenario_symmetric(nodes=4):
    """Flat-band, symmetric contacts, no generation."""
    mesh = build_three_layer_mesh((0.0, 2.0, 4.0, 6.0), nodes)
    par = DimensionlessParams(lam=1.0, nu=1.0, delta=1.0, gamma=1.0)
    psi_d = float(np.arcsinh(0.05) + 0.5)
    return make_scenario(
        mesh, par, doping=0.1, dirichlet=(0.5, 0.5, psi_d, psi_d),
        anion_mass_target=1.0,
    )


def scenario_biased(nodes=4):
    """Region-wise doping and a potential drop across the device."""
    mesh = build_three_layer_mesh((0.0, 2.0, 4.0, 6.0), nodes)
    par = DimensionlessParams(lam=1.0, nu=1.0, delta=1.0, gamma=1.0)
    psi_l = float(np.arcsinh(-0.25) + 1.0)
    psi_r = float(np.arcsinh(0.25))
    return make_scenario(
        mesh, par, doping=(-0.5, -0.5, 0.5), dirichlet=(1.0, 0.0, psi_l, psi_r),
        anion_mass_target=1.0,
    )


def scenario_device(nodes=4):
    """Every feature on: degenerate statistics, band offsets, generation,
    recombination, uneven layers, heterogeneous coefficients."""
    mesh = build_three_layer_mesh((0.0, 1.0, 3.5, 4.2), nodes)
    par = DimensionlessParams(lam=0.03, nu=1e-3, delta=0.1, gamma=0.5)
    rec = RecombinationParams(
        enabled=True, r0=0.2, tau_n=1.0, tau_p=2.0, n_n_tau=0.05, n_p_tau=0.1
    )
    return make_scenario(
        mesh, par,
        statistics=("fermi_dirac_half", "fermi_dirac_half", "fermi_dirac_minus_one"),
        doping=(-0.3, 0.0, 0.4),
        generation=(0.0, 0.8, 0.0),
        recombination=rec,
        dirichlet=(0.2, -0.1, 0.3, -0.2),
        density_scales={"n": (0.7, 1.0, 1.5), "p": (1.2, 1.0, 0.6), "a": 1.0},
        band_shifts={"n": (-0.15, 0.0, 0.1), "p": (0.1, 0.0, -0.2)},
        mobilities={"n": (0.5, 1.0, 2.0), "p": (1.5, 1.0, 0.8)},
        permittivity=(0.9, 1.0, 1.3),
    )


def random_state(scenario, rng, spread=0.6):
    mesh = scenario.mesh
    mid_phi = 0.5 * (scenario.phi_D[0] + scenario.phi_D[1])
    mid_psi = 0.5 * (scenario.psi_D[0] + scenario.psi_D[1])
    return State(
        psi=mid_psi + rng.uniform(-spread, spread, mesh.n_cells),
        phi_n=mid_phi + rng.uniform(-spread, spread, mesh.n_cells),
        phi_p=mid_phi + rng.uniform(-spread, spread, mesh.n_cells),
        phi_a=mid_phi + rng.uniform(-spread, spread, mesh.n_intr),
    )


def max_scaled_jacobian_gap(scenario, n_states, seed, tau=0.7):
    """Central finite differences column by column against the assembled matrix."""
    layout = Layout(scenario.mesh)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_states):
        state = random_state(scenario, rng)
        old = random_state(scenario, rng)
        jac = system.assemble_residual(state, old, tau, scenario, layout).jacobian.toarray()
        x0 = layout.pack(state)
        fd = np.empty_like(jac)
        for j in range(layout.n_dof):
            h = 1e-7 * (1.0 + abs(x0[j]))
            xp, xm = x0.copy(), x0.copy()
            xp[j] += h
            xm[j] -= h
            rp = system.assemble_residual(
                layout.unpack(xp, 0.0), old, tau, scenario, layout, with_jacobian=False
            ).residual
            rm = system.assemble_residual(
                layout.unpack(xm, 0.0), old, tau, scenario, layout, with_jacobian=False
            ).residual
            fd[:, j] = (rp - rm) / (2.0 * h)
        worst = max(worst, float(np.max(np.abs(jac - fd) / (1.0 + np.abs(fd)))))
    return worst


class TestLayout:
    def test_widths_and_dof_count(self):
        sc = scenario_symmetric(3)
        layout = Layout(sc.mesh)
        assert layout.n_dof == 3 * sc.mesh.n_cells + sc.mesh.n_intr
        assert layout.idx_a.size == sc.mesh.n_intr

    def test_pack_unpack_roundtrip(self):
        sc = scenario_symmetric(3)
        layout = Layout(sc.mesh)
        rng = np.random.default_rng(7)
        state = random_state(sc, rng)
        back = layout.unpack(layout.pack(state), time=0.0)
        np.testing.assert_array_equal(back.psi, state.psi)
        np.testing.assert_array_equal(back.phi_n, state.phi_n)
        np.testing.assert_array_equal(back.phi_p, state.phi_p)
        np.testing.assert_array_equal(back.phi_a, state.phi_a)


class TestTimeGrid:
    def test_uniform_steps_fill_span(self):
        taus = TimeGrid(0.0, 8.0, 0.1).steps()
        assert taus.size == 80
        assert taus.sum() == pytest.approx(8.0, rel=1e-14)

    def test_explicit_step_list(self):
        taus = TimeGrid(0.0, 1.0, [0.25, 0.25, 0.5]).steps()
        np.testing.assert_array_equal(taus, [0.25, 0.25, 0.5])

    def test_rejects_empty_span(self):
        with pytest.raises(ConfigError):
            TimeGrid(1.0, 1.0, 0.1).steps()

    def test_rejects_negative_step(self):
        with pytest.raises(ConfigError):
            TimeGrid(0.0, 1.0, [0.5, -0.1, 0.6]).steps()

    def test_rejects_misfit_steps(self):
        with pytest.raises(ConfigError):
            TimeGrid(0.0, 1.0, [0.3, 0.3, 0.3]).steps()


class TestNewtonOptions:
    def test_rejects_bad_tolerances(self):
        with pytest.raises(ConfigError):
            NewtonOptions(abs_tol=0.0)

    def test_rejects_bad_damping(self):
        with pytest.raises(ConfigError):
            NewtonOptions(damping_initial=1.5)
        with pytest.raises(ConfigError):
            NewtonOptions(damping_growth=0.5)


class TestJacobian:
    def test_symmetric_scenario(self):
        assert max_scaled_jacobian_gap(scenario_symmetric(4), 6, seed=11) <= 1e-6

    def test_biased_scenario(self):
        assert max_scaled_jacobian_gap(scenario_biased(4), 6, seed=12) <= 1e-6

    def test_device_scenario(self):
        assert max_scaled_jacobian_gap(scenario_device(4), 6, seed=13) <= 1e-6

    def test_stationary_assembly(self):
        assert max_scaled_jacobian_gap(scenario_device(3), 3, seed=14, tau=np.inf) <= 1e-6


class TestConservativity:
    def recompute_face_fluxes(self, scenario, state, species_name):
        """The scheme's flux from both sides of every supporting interior face."""
        mesh = scenario.mesh
        sp = scenario.species(species_name)
        phi = {"n": state.phi_n, "p": state.phi_p, "a": state.phi_a}[species_name]
        n = sp.density(phi, state.psi[sp.cells])
        log_n = np.log(n)
        v = sp.z * phi - log_n
        if species_name == "a":
            faces = np.flatnonzero(mesh.face_intr_interior)
            loc = mesh.intr_index_of_cell
        else:
            faces = np.flatnonzero((mesh.face_kind == 0) & (mesh.face_cell_l >= 0))
            loc = np.arange(mesh.n_cells)
        tau_hat = mesh.face_tau * sp.mobility_face
        out = []
        for f in faces:
            k, l = loc[mesh.face_cell_k[f]], loc[mesh.face_cell_l[f]]
            q_kl = v[l] - v[k]
            q_lk = v[k] - v[l]
            j_k = sedan_flux_core(
                sp.z, tau_hat[f], n[k], n[l], q_kl, phi[l] - phi[k]
            )
            j_l = sedan_flux_core(
                sp.z, tau_hat[f], n[l], n[k], q_lk, phi[k] - phi[l]
            )
            out.append((f, float(j_k), float(j_l)))
        return out

    def test_flux_pairs_cancel_exactly(self):
        sc = scenario_device(4)
        rng = np.random.default_rng(21)
        state = random_state(sc, rng)
        rs = system.assemble_residual(state, state, np.inf, sc, with_jacobian=False)
        for name in ("n", "p", "a"):
            pairs = self.recompute_face_fluxes(sc, state, name)
            assert pairs
            for f, j_k, j_l in pairs:
                assert j_k + j_l == 0.0  # exact, not approximate
                assert rs.fluxes[name][f] == j_k  # assembly stores the K-side value

    def test_species_rows_telescope_to_boundary_fluxes(self):
        # interior contributions cancel pairwise, so each species' row sum
        # reduces to its boundary fluxes up to summation roundoff
        sc = scenario_symmetric(5)
        rng = np.random.default_rng(22)
        state = random_state(sc, rng)
        layout = Layout(sc.mesh)
        rs = system.assemble_residual(state, state, np.inf, sc, layout,
                                      with_jacobian=False)
        last = len(sc.mesh.faces) - 1
        for name, idx in (("n", layout.idx_n), ("p", layout.idx_p)):
            total = float(np.sum(rs.residual[idx]))
            boundary = rs.fluxes[name][0] + rs.fluxes[name][last]
            scale = np.sum(np.abs(rs.fluxes[name]))
            assert abs(total - boundary) <= 1e-13 * scale

    def test_anion_rows_sum_to_zero(self):
        # no anion boundary faces, so the stationary anion block telescopes to 0
        sc = scenario_device(4)
        rng = np.random.default_rng(23)
        state = random_state(sc, rng)
        layout = Layout(sc.mesh)
        rs = system.assemble_residual(state, state, np.inf, sc, layout,
                                      with_jacobian=False)
        total = float(np.sum(rs.residual[layout.idx_a]))
        scale = max(1.0, float(np.sum(np.abs(rs.fluxes["a"]))))
        assert abs(total) <= 1e-13 * scale


class TestPoissonSolve:
    def test_energy_history_is_monotone(self):
        sc = scenario_biased(5)
        mesh = sc.mesh
        history = []
        psi = system.solve_poisson_given_qfp(
            sc,
            phi_n=sc.phi_D_cells, phi_p=sc.phi_D_cells,
            phi_a=np.full(mesh.n_intr, 0.5),
            history=history,
        )
        assert len(history) >= 2
        assert np.all(np.diff(history) <= 1e-14 * (1.0 + np.abs(history[:-1])))
        assert psi.shape == (mesh.n_cells,)

    def test_solution_is_warm_start_independent(self):
        sc = scenario_device(4)
        mesh = sc.mesh
        args = dict(
            phi_n=sc.phi_D_cells, phi_p=sc.phi_D_cells,
            phi_a=np.full(mesh.n_intr, 0.0),
        )
        cold = system.solve_poisson_given_qfp(sc, **args)
        warm = system.solve_poisson_given_qfp(sc, psi0=cold + 0.3, **args)
        np.testing.assert_allclose(warm, cold, rtol=0, atol=1e-10)

    def test_prepared_state_satisfies_poisson(self):
        sc = scenario_symmetric(5)
        layout = Layout(sc.mesh)
        init = system.prepare_initial_state(sc, "sinusoidal")
        rs = system.assemble_residual(init, init, np.inf, sc, layout,
                                      with_jacobian=False)
        assert np.max(np.abs(rs.residual[layout.idx_psi])) <= 1e-9


class TestEquilibrium:
    def test_mass_target_is_hit(self):
        sc = scenario_symmetric(5)
        eq = system.solve_equilibrium(sc)
        assert diagnostics.anion_mass(eq, sc) == pytest.approx(1.0, rel=1e-12)

    def test_quasi_fermi_levels_are_flat(self):
        sc = scenario_symmetric(5)
        eq = system.solve_equilibrium(sc)
        assert np.max(np.abs(eq.phi_n - 0.5)) <= 1e-12
        assert np.max(np.abs(eq.phi_p - 0.5)) <= 1e-12
        assert np.max(np.abs(eq.phi_a - eq.phi_a[0])) <= 1e-12

    def test_dissipation_vanishes(self):
        sc = scenario_symmetric(5)
        eq = system.solve_equilibrium(sc)
        assert abs(diagnostics.discrete_dissipation(eq, sc)) <= 1e-12

    def test_rejects_applied_bias(self):
        sc = scenario_biased(4)
        with pytest.raises(ConfigError):
            system.solve_equilibrium(sc)

    def test_rejects_illumination(self):
        mesh = build_three_layer_mesh((0.0, 2.0, 4.0, 6.0), 3)
        par = DimensionlessParams(lam=1.0, nu=1.0, delta=1.0, gamma=1.0)
        sc = make_scenario(mesh, par, generation=0.3, anion_mass_target=1.0)
        with pytest.raises(ConfigError):
            system.solve_equilibrium(sc)

    def test_rejects_unreachable_mass(self):
        sc = scenario_symmetric(4)
        supremum = float(np.sum(
            sc.mesh.cell_measure[sc.mesh.intr_cells] * sc.scale_a * sc.stat_a.x_max
        ))
        with pytest.raises(MassOutOfRange):
            system.solve_equilibrium(sc, anion_mass_target=0.0)
        with pytest.raises(MassOutOfRange):
            system.solve_equilibrium(sc, anion_mass_target=supremum)

    def test_mass_parameter_overrides_scenario(self):
        sc = scenario_symmetric(4)
        eq = system.solve_equilibrium(sc, anion_mass_target=0.5)
        assert diagnostics.anion_mass(eq, sc) == pytest.approx(0.5, rel=1e-12)


class TestSteadyState:
    def test_matches_equilibrium_without_forcing(self):
        sc = scenario_symmetric(5)
        init = system.prepare_initial_state(sc, "sinusoidal")
        steady = system.solve_steady_state(sc, init)
        eq = system.solve_equilibrium(
            sc, anion_mass_target=diagnostics.anion_mass(init, sc)
        )
        for field in ("psi", "phi_n", "phi_p", "phi_a"):
            gap = np.max(np.abs(getattr(steady, field) - getattr(eq, field)))
            assert gap <= 1e-10, field

    def test_preserves_initial_anion_mass(self):
        sc = scenario_device(4)
        init = system.prepare_initial_state(sc, "constant")
        steady = system.solve_steady_state(sc, init)
        assert diagnostics.anion_mass(steady, sc) == pytest.approx(
            diagnostics.anion_mass(init, sc), rel=1e-10
        )
        assert np.isinf(steady.time)

    def test_residual_is_small_at_steady_state(self):
        sc = scenario_biased(4)
        init = system.prepare_initial_state(sc, "constant")
        steady = system.solve_steady_state(sc, init)
        layout = Layout(sc.mesh)
        rs = system.assemble_residual(steady, steady, np.inf, sc, layout,
                                      with_jacobian=False)
        keep = np.ones(layout.n_dof, dtype=bool)
        keep[layout.idx_a[0]] = False  # row carries the mass constraint instead
        assert np.max(np.abs(rs.residual[keep])) <= 1e-9


class TestNewton:
    def test_already_converged_state_returns_after_one_evaluation(self):
        sc = scenario_symmetric(4)
        eq = system.solve_equilibrium(sc)
        layout = Layout(sc.mesh)
        calls = []

        def residual_fn(state, with_jacobian=True):
            calls.append(1)
            return system.assemble_residual(state, eq, 0.1, sc, layout,
                                            with_jacobian=with_jacobian)

        out = system.newton_solve(eq, residual_fn, NewtonOptions(abs_tol=1e-7),
                                  sc, layout)
        assert len(calls) == 1
        np.testing.assert_array_equal(out.psi, eq.psi)


class TestTransient:
    def test_equilibrium_is_a_fixed_point(self):
        sc = scenario_symmetric(5)
        eq = system.solve_equilibrium(sc)
        grid = TimeGrid(0.0, 0.5, 0.1)
        res = system.run_transient(sc, grid, eq)
        for field in ("psi", "phi_n", "phi_p", "phi_a"):
            gap = np.max(np.abs(getattr(res.final_state, field) - getattr(eq, field)))
            assert gap <= 1e-9, field

    def test_entropy_decays_without_applied_bias(self):
        # boundary-relative entropy is a Lyapunov function only for
        # equilibrium boundary data; under bias the monotone quantity is
        # the distance to the steady state, tested below
        sc = scenario_symmetric(5)
        init = system.prepare_initial_state(sc, "sinusoidal")
        res = system.run_transient(sc, TimeGrid(0.0, 2.0, 0.1), init)
        e = np.array([r.entropy_E_T for r in res.records])
        assert np.all(np.diff(e) <= 1e-12 * (1.0 + np.abs(e[:-1])))

    def test_distance_to_steady_decays_under_bias(self):
        sc = scenario_biased(5)
        init = system.prepare_initial_state(sc, "quadratic")
        steady = system.solve_steady_state(sc, init)
        res = system.run_transient(sc, TimeGrid(0.0, 2.0, 0.1), init, steady=steady)
        e = np.array([r.entropy_vs_steady_E_inf for r in res.records])
        assert np.all(np.diff(e) <= 1e-12 * (1.0 + np.abs(e[:-1])))
        assert e[-1] <= 0.5 * e[0]

    def test_mass_is_conserved_along_the_run(self):
        sc = scenario_biased(5)
        init = system.prepare_initial_state(sc, "quadratic")
        res = system.run_transient(sc, TimeGrid(0.0, 2.0, 0.1), init)
        mass = np.array([r.anion_mass for r in res.records])
        assert np.max(np.abs(mass - mass[0])) <= 1e-10 * mass[0]

    def test_records_cover_the_time_grid(self):
        sc = scenario_symmetric(4)
        init = system.prepare_initial_state(sc, "sinusoidal")
        res = system.run_transient(sc, TimeGrid(0.0, 0.4, 0.1), init)
        times = [r.time for r in res.records]
        assert times[0] == 0.0
        assert times[-1] == pytest.approx(0.4, rel=1e-14)
        assert len(times) >= 5
        assert res.final_state.time == pytest.approx(0.4, rel=1e-14)

    def test_keep_states_returns_one_state_per_record(self):
        sc = scenario_symmetric(4)
        init = system.prepare_initial_state(sc, "sinusoidal")
        res = system.run_transient(sc, TimeGrid(0.0, 0.3, 0.1), init,
                                   keep_states=True)
        assert len(res.states) == len(res.records)
        np.testing.assert_array_equal(res.states[-1].psi, res.final_state.psi)

    def test_sink_receives_records_as_they_appear(self):
        sc = scenario_symmetric(4)
        init = system.prepare_initial_state(sc, "sinusoidal")
        seen = []
        res = system.run_transient(sc, TimeGrid(0.0, 0.2, 0.1), init,
                                   sink=seen.append)
        assert len(seen) == len(res.records)
        assert seen[0].time == 0.0

    def test_unreachable_tolerance_raises_step_failure(self):
        sc = scenario_biased(4)
        init = system.prepare_initial_state(sc, "quadratic")
        opts = NewtonOptions(abs_tol=1e-300, rel_tol=1e-300, max_iters=1)
        with pytest.raises(StepFailure):
            system.run_transient(sc, TimeGrid(0.0, 0.2, 0.1), init, opts=opts)

    def test_steady_reference_enables_distance_columns(self):
        sc = scenario_symmetric(4)
        init = system.prepare_initial_state(sc, "sinusoidal")
        steady = system.solve_steady_state(sc, init)
        res = system.run_transient(sc, TimeGrid(0.0, 0.3, 0.1), init, steady=steady)
        rec = res.records[-1]
        assert rec.entropy_vs_steady_E_inf is not None
        assert rec.entropy_vs_steady_E_inf >= 0.0
        assert set(rec.l2_errors) == set(diagnostics.L2_FIELDS)
