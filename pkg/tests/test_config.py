"""Config loading: schema checks, physical-unit conversion, error paths."""

import math

import numpy as np
import pytest
import tomli

from psim.config import build_setup, load_config
from psim.errors import ConfigError


def minimal_toml(**overrides):
    text = """
[mesh]
breakpoints = [0.0, 2.0, 4.0, 6.0]
nodes_per_region = 5

[params]
mode = "dimensionless"
lam = 1.0
nu = 1.0
delta = 1.0
gamma = 1.0

[doping]
C = 0.1

[dirichlet]
phi_left = 0.5
phi_right = 0.5
psi_left = "arcsinh_half_doping_plus(0.5)"
psi_right = "arcsinh_half_doping_plus(0.5)"

[initial]
kind = "sinusoidal"
amplitude = 0.5

[time]
t_end = 2.0
dt = 0.5
"""
    cfg = tomli.loads(text)
    for key, value in overrides.items():
        if value is None:
            cfg.pop(key, None)
        elif isinstance(value, dict) and key in cfg:
            cfg[key] = {**cfg[key], **{k: v for k, v in value.items() if v is not None}}
            for k in [k for k, v in value.items() if v is None]:
                cfg[key].pop(k, None)
        else:
            cfg[key] = value
    return cfg


def physical_toml(**overrides):
    text = """
[mesh]
breakpoints = [0.0, 1.0e-5, 3.0e-5, 4.0e-5]
nodes_per_region = 4

[params]
mode = "physical"
l = 4.0e-5
T = 298.0
eps_s = 2.0e-12
N_tilde = 1.0e18
N_a_tilde = 1.0e19
mu_tilde = 10.0
mu_a_tilde = 1.0e-10
F_ph = 2.0e17
alpha_g = 1.0e5

[doping]
C = [-1.0e17, 0.0, 1.0e17]

[dirichlet]
phi_left = 0.0
phi_right = 0.0
psi_left = -0.1
psi_right = 0.1

[initial]
kind = "constant"

[time]
t_end = 32.0
dt = 8.0
"""
    cfg = tomli.loads(text)
    for key, value in overrides.items():
        if isinstance(value, dict) and key in cfg:
            cfg[key] = {**cfg[key], **value}
        else:
            cfg[key] = value
    return cfg


def build(cfg, **kwargs):
    return build_setup(cfg, "test", "", **kwargs)


class TestDimensionlessSchema:
    def test_minimal_config_builds(self):
        setup = build(minimal_toml())
        sc = setup.scenario
        assert sc.mesh.n_cells == 15
        assert sc.params.lam2 == 1.0
        assert setup.time_scale == 1.0
        assert setup.label == "test"
        assert len(setup.grid.steps()) == 4

    def test_formula_boundary_values(self):
        sc = build(minimal_toml()).scenario
        want = math.asinh(0.05) + 0.5
        assert sc.psi_D[0] == pytest.approx(want, rel=1e-15)
        assert sc.psi_D[1] == pytest.approx(want, rel=1e-15)

    def test_formula_uses_adjacent_region_doping(self):
        cfg = minimal_toml(doping={"C": [-0.4, 0.0, 0.8]})
        sc = build(cfg).scenario
        assert sc.psi_D[0] == pytest.approx(math.asinh(-0.2) + 0.5, rel=1e-14)
        assert sc.psi_D[1] == pytest.approx(math.asinh(0.4) + 0.5, rel=1e-14)

    def test_unknown_top_level_table_rejected(self):
        with pytest.raises(ConfigError, match="unknown"):
            build(minimal_toml(extras={"x": 1}))

    def test_unknown_key_in_table_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            build(minimal_toml(mesh={"breakpoints": [0, 2, 4, 6],
                                     "nodes_per_region": 5, "typo": 1}))

    def test_provenance_keys_are_ignored(self):
        cfg = minimal_toml(doping={"C": 0.1, "provenance": "external:somewhere"})
        assert build(cfg).scenario.params.lam2 == 1.0

    def test_missing_required_table(self):
        with pytest.raises(ConfigError, match="mesh"):
            build(minimal_toml(mesh=None))

    def test_bool_rejected_where_number_expected(self):
        with pytest.raises(ConfigError):
            build(minimal_toml(params={"lam": True, "mode": "dimensionless",
                                       "nu": 1.0, "delta": 1.0, "gamma": 1.0}))

    def test_bad_formula_rejected(self):
        cfg = minimal_toml(dirichlet={"psi_left": "arcsinh_of_something(0.5)"})
        with pytest.raises(ConfigError):
            build(cfg)

    def test_time_table_optional(self):
        setup = build(minimal_toml(time=None))
        assert setup.grid is None

    def test_explicit_step_list(self):
        cfg = minimal_toml(time={"t_end": 2.0, "dt": [0.5, 0.5, 1.0]})
        np.testing.assert_allclose(build(cfg).grid.steps(), [0.5, 0.5, 1.0])

    def test_steps_must_fill_span(self):
        cfg = minimal_toml(time={"t_end": 2.0, "dt": [0.5, 0.5]})
        with pytest.raises(ConfigError):
            build(cfg).grid.steps()

    def test_nodes_override(self):
        setup = build(minimal_toml(), nodes_per_region=9)
        assert setup.scenario.mesh.n_cells == 27

    def test_out_dir_override(self):
        setup = build(minimal_toml(), out_dir="elsewhere")
        assert setup.outputs.directory == "elsewhere"

    def test_statistics_table(self):
        cfg = minimal_toml(statistics={"electrons": "fermi_dirac_half",
                                       "holes": "boltzmann",
                                       "anions": "fermi_dirac_minus_one"})
        sc = build(cfg).scenario
        assert sc.species("n").stat.eval(0.0) == pytest.approx(0.765147, abs=1e-6)
        assert sc.species("p").stat.eval(0.0) == pytest.approx(1.0, rel=1e-15)
        assert sc.species("a").stat.eval(0.0) == pytest.approx(0.5, rel=1e-14)

    def test_anions_mass_target(self):
        cfg = minimal_toml(anions={"mass_target": 2.5})
        assert build(cfg).scenario.anion_mass_target == 2.5

    def test_anions_mean_fill(self):
        cfg = minimal_toml(anions={"mean_fill": 0.5})
        sc = build(cfg).scenario
        intr = sc.mesh.cell_region == 1
        capacity = float(np.sum(sc.mesh.cell_measure[intr] * sc.scale_a))
        assert sc.anion_mass_target == pytest.approx(0.5 * capacity, rel=1e-14)

    def test_anions_mass_and_fill_conflict(self):
        with pytest.raises(ConfigError):
            build(minimal_toml(anions={"mass_target": 1.0, "mean_fill": 0.5}))

    def test_solver_overrides(self):
        cfg = minimal_toml(solver={"max_iters": 7, "abs_tol": 1e-9})
        setup = build(cfg)
        assert setup.solver.max_iters == 7
        assert setup.solver.abs_tol == 1e-9

    def test_outputs_table(self):
        cfg = minimal_toml(outputs={"directory": "d", "profiles_at": [0.0, 2.0],
                                    "plots": False, "steady": False})
        out = build(cfg).outputs
        assert out.directory == "d"
        assert out.profiles_at == (0.0, 2.0)
        assert out.plots is False and out.steady is False

    def test_generation_constant(self):
        cfg = minimal_toml(generation={"kind": "constant", "value": 0.25})
        sc = build(cfg).scenario
        intr = sc.mesh.cell_region == 1
        assert np.all(sc.fields.generation_G[intr] == 0.25)
        assert np.all(sc.fields.generation_G[~intr] == 0.0)

    def test_generation_negative_rejected(self):
        with pytest.raises(ConfigError):
            build(minimal_toml(generation={"kind": "constant", "value": -1.0}))

    def test_beer_lambert_requires_physical_mode(self):
        with pytest.raises(ConfigError):
            build(minimal_toml(generation={"kind": "beer_lambert"}))


class TestPhysicalConversion:
    def test_dimensionless_groups(self):
        cfg = physical_toml()
        setup = build(cfg)
        par = setup.scenario.params
        q = 1.602176634e-19
        kb = 1.380649e-23
        u_t = kb * 298.0 / q
        l = 4.0e-5
        lam2 = 2.0e-12 * u_t / (l * l * q * 1.0e19)
        assert par.lam2 == pytest.approx(lam2, rel=1e-12)
        assert par.nu == pytest.approx(1.0e-10 / 10.0, rel=1e-15)
        assert par.delta == pytest.approx(1.0e18 / 1.0e19, rel=1e-15)
        gamma = 2.0e17 * 1.0e5 * l * l / (10.0 * u_t * 1.0e18)
        assert par.gamma == pytest.approx(gamma, rel=1e-12)

    def test_time_rescaled_by_anion_diffusion_time(self):
        setup = build(physical_toml())
        q = 1.602176634e-19
        u_t = 1.380649e-23 * 298.0 / q
        t0 = (4.0e-5) ** 2 / (1.0e-10 * u_t)
        assert setup.time_scale == pytest.approx(t0, rel=1e-12)
        assert setup.grid.t_end == pytest.approx(32.0 / t0, rel=1e-12)
        assert len(setup.grid.steps()) == 4

    def test_mesh_rescaled_to_unit_domain(self):
        sc = build(physical_toml()).scenario
        centers = sc.mesh.cell_center
        assert centers.min() > 0.0 and centers.max() < 1.0
        widths = np.array([0.25, 0.5, 0.25])
        region_width = np.array([
            sc.mesh.cell_measure[sc.mesh.cell_region == r].sum() for r in range(3)
        ])
        np.testing.assert_allclose(region_width, widths, rtol=1e-12)

    def test_breakpoint_span_must_match_l(self):
        cfg = physical_toml(mesh={"breakpoints": [0.0, 1.0e-5, 3.0e-5, 5.0e-5],
                                  "nodes_per_region": 4})
        with pytest.raises(ConfigError, match="span"):
            build(cfg)

    def test_volts_divided_by_thermal_voltage(self):
        sc = build(physical_toml()).scenario
        q = 1.602176634e-19
        u_t = 1.380649e-23 * 298.0 / q
        assert sc.psi_D[0] == pytest.approx(-0.1 / u_t, rel=1e-13)
        assert sc.psi_D[1] == pytest.approx(0.1 / u_t, rel=1e-13)

    def test_doping_scaled_by_carrier_density(self):
        sc = build(physical_toml()).scenario
        doping = sc.fields.doping_C
        assert doping[0] == pytest.approx(-0.1, rel=1e-14)
        assert doping[-1] == pytest.approx(0.1, rel=1e-14)

    def test_band_shifts_and_density_scales(self):
        cfg = physical_toml(params={"E_n": [-0.1, 0.0, 0.05],
                                    "N_n": [2.0e18, 1.0e18, 5.0e17]})
        sc = build(cfg).scenario
        q = 1.602176634e-19
        u_t = 1.380649e-23 * 298.0 / q
        sp = sc.species("n")
        assert sp.shift[0] == pytest.approx(-0.1 / u_t, rel=1e-13)
        assert sp.scale[0] == pytest.approx(2.0, rel=1e-15)
        assert sp.scale[-1] == pytest.approx(0.5, rel=1e-15)

    def test_permittivity_relative_to_intrinsic(self):
        cfg = physical_toml(params={"eps_s": [1.0e-12, 2.0e-12, 4.0e-12]})
        sc = build(cfg).scenario
        assert sc.permittivity_face[0] == pytest.approx(0.5, rel=1e-15)
        assert sc.permittivity_face[-1] == pytest.approx(2.0, rel=1e-15)

    def test_mobilities_scaled_by_reference(self):
        cfg = physical_toml(mobilities={"n": [5.0, 10.0, 2.0], "a": 2.0e-10})
        sc = build(cfg).scenario
        mob = sc.species("n").mobility_face
        assert mob[0] == pytest.approx(0.5, rel=1e-15)
        mob_a = sc.species("a").mobility_face
        intr_faces = sc.mesh.face_intr_interior
        assert np.all(mob_a[intr_faces] == pytest.approx(2.0, rel=1e-15))

    def test_beer_lambert_generation(self):
        cfg = physical_toml(generation={"kind": "beer_lambert", "direction": "left"})
        sc = build(cfg).scenario
        g = sc.fields.generation_G
        intr = sc.mesh.cell_region == 1
        x = sc.mesh.cell_center[intr]
        np.testing.assert_allclose(
            g[intr], np.exp(-1.0e5 * 4.0e-5 * (x - 0.25)), rtol=1e-12)
        assert np.all(g[~intr] == 0.0)

    def test_formula_rejected_in_physical_mode(self):
        cfg = physical_toml(dirichlet={"psi_left": "arcsinh_half_doping_plus(0.0)"})
        with pytest.raises(ConfigError):
            build(cfg)

    def test_missing_physical_key(self):
        cfg = physical_toml()
        del cfg["params"]["mu_a_tilde"]
        with pytest.raises(ConfigError, match="mu_a_tilde"):
            build(cfg)


class TestLoadConfig:
    def test_round_trip_from_file(self, tmp_path):
        path = tmp_path / "conf.toml"
        path.write_text("""
[mesh]
breakpoints = [0.0, 2.0, 4.0, 6.0]
nodes_per_region = 3

[params]
mode = "dimensionless"
lam = 2.0
nu = 1.0
delta = 1.0
gamma = 0.0

[doping]
C = 0.0

[dirichlet]
phi_left = 0.0
phi_right = 0.0
psi_left = 0.0
psi_right = 0.0

[initial]
kind = "constant"
""")
        setup = load_config(str(path))
        assert setup.label == "conf"
        assert setup.scenario.params.lam2 == 4.0
        assert setup.grid is None
        assert setup.config_text == path.read_text()

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_config("does/not/exist.toml")

    def test_invalid_toml(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("not toml [")
        with pytest.raises(ConfigError, match="TOML"):
            load_config(str(path))


class TestShippedConfigs:
    @pytest.mark.parametrize("name", ["test1a", "test1b", "psc"])
    def test_loads_and_validates(self, name):
        setup = load_config(f"configs/{name}.toml")
        assert setup.grid is not None
        assert setup.scenario.mesh.n_cells > 0

    def test_symmetric_config_shape(self):
        setup = load_config("configs/test1a.toml")
        sc = setup.scenario
        assert sc.mesh.n_cells == 3 * 513
        assert sc.phi_D == (0.5, 0.5)
        assert sc.psi_D[0] == sc.psi_D[1]
        assert len(setup.grid.steps()) == 800

    def test_biased_config_shape(self):
        setup = load_config("configs/test1b.toml")
        sc = setup.scenario
        assert sc.phi_D == (1.0, 0.0)
        assert sc.psi_D[0] == pytest.approx(math.asinh(-0.25) + 1.0, rel=1e-14)
        assert sc.psi_D[1] == pytest.approx(math.asinh(0.25), rel=1e-14)

    def test_device_template_is_physical(self):
        setup = load_config("configs/psc.toml")
        sc = setup.scenario
        assert setup.time_scale > 1.0
        assert sc.mesh.n_cells == 3 * 129
        assert sc.params.lam2 < 1e-6
        assert len(setup.grid.steps()) == 440
