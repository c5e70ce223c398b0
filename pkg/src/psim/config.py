"""TOML run configurations mapped onto meshes, scenarios, and solver settings.

A config file describes one simulation in named tables: ``[mesh]``,
``[params]``, and ``[dirichlet]`` are required; ``[statistics]``,
``[doping]``, ``[generation]``, ``[recombination]``, ``[mobilities]``,
``[anions]``, ``[initial]``, ``[time]``, ``[solver]``, and ``[outputs]``
are optional with documented defaults.

``[params]`` carries a ``mode`` switch.  In ``dimensionless`` mode the
four model parameters are given directly and every other quantity is
already rescaled.  In ``physical`` mode the table holds laboratory-unit
device data (cm / K / V / s); the loader derives the dimensionless
parameters, converts band edges to thermal-voltage units and densities
to their scale ratios, and rescales boundary values (volts) and times
(seconds, against the vacancy diffusion time l^2 / (mu_a U_T)).

Boundary entries accept either numbers or the formula string
``arcsinh_half_doping_plus(c)``, which evaluates arcsinh of half the
doping in the adjacent contact layer plus the constant c; no other
expressions are accepted.
"""

import math
import re
from dataclasses import dataclass

import numpy as np

try:
    import tomllib as tomli
except ModuleNotFoundError:
    import tomli

from .errors import ConfigError, DomainError
from .mesh import Mesh, build_three_layer_mesh
from .physics import (
    DimensionlessParams,
    PhysicalParams,
    RecombinationParams,
    as_region_values,
    nondimensionalize,
)
from .scenario import Scenario, make_scenario
from .system import NewtonOptions, TimeGrid

__all__ = ["OutputOptions", "RunSetup", "load_config", "build_setup"]

_MISSING = object()
_FORMULA = re.compile(r"arcsinh_half_doping_plus\(\s*([^\s()]+)\s*\)\Z")

_TOP_LEVEL = (
    "mesh", "params", "statistics", "doping", "generation", "recombination",
    "mobilities", "dirichlet", "anions", "initial", "time", "solver", "outputs",
)

_PHYSICAL_KEYS = (
    "l", "T", "eps_s", "N_tilde", "N_a_tilde", "mu_tilde", "mu_a_tilde",
    "F_ph", "alpha_g",
)


@dataclass(frozen=True)
class OutputOptions:
    directory: str = "out"
    profiles_at: tuple = ()
    plots: bool = True
    steady: bool = True


@dataclass(frozen=True)
class RunSetup:
    """Everything one command needs: the scenario plus run settings."""

    scenario: Scenario
    grid: object  # TimeGrid, or None when the config has no [time] table
    solver: NewtonOptions
    initial_kind: str
    initial_amplitude: object  # float or None for the profile default
    initial_path: object  # str for from_file profiles
    outputs: OutputOptions
    time_scale: float  # seconds per dimensionless time unit
    label: str
    config_text: str


def _reject_unknown(table, allowed, where):
    # 'provenance' is always allowed: a free-form note naming the data source
    extra = sorted(set(table) - set(allowed) - {"provenance"})
    if extra:
        raise ConfigError(f"unknown key {extra[0]!r} in [{where}]")


def _get(table, key, where, default=_MISSING):
    if key in table:
        return table[key]
    if default is _MISSING:
        raise ConfigError(f"[{where}] is missing required key {key!r}")
    return default


def _number(table, key, where, default=_MISSING):
    value = _get(table, key, where, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"[{where}] {key} must be a number, got {value!r}")
    return float(value)


def _region_triple(value, key, where):
    """Scalar or [HTL, intrinsic, ETL] list, returned as float or tuple."""
    if isinstance(value, bool):
        raise ConfigError(f"[{where}] {key} must be numeric")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, list) and len(value) == 3 and all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
    ):
        return tuple(float(v) for v in value)
    raise ConfigError(f"[{where}] {key} must be a number or a 3-entry list")


def _parse_mesh(cfg):
    table = _get(cfg, "mesh", "config")
    _reject_unknown(table, ("breakpoints", "nodes_per_region"), "mesh")
    points = _get(table, "breakpoints", "mesh")
    if (
        not isinstance(points, list)
        or len(points) != 4
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in points)
    ):
        raise ConfigError("[mesh] breakpoints must be a list of 4 numbers")
    nodes = _get(table, "nodes_per_region", "mesh")
    if isinstance(nodes, bool) or not isinstance(nodes, int):
        raise ConfigError("[mesh] nodes_per_region must be an integer")
    return tuple(float(v) for v in points), nodes


def _parse_params(cfg):
    """Returns (DimensionlessParams, PhysicalParams or None)."""
    table = _get(cfg, "params", "config")
    mode = _get(table, "mode", "params", "dimensionless")
    if mode == "dimensionless":
        _reject_unknown(table, ("mode", "lam", "nu", "delta", "gamma", "z_a"), "params")
        z_a = table.get("z_a", 1)
        if isinstance(z_a, bool) or not isinstance(z_a, int):
            raise ConfigError("[params] z_a must be an integer")
        try:
            par = DimensionlessParams(
                lam=_number(table, "lam", "params"),
                nu=_number(table, "nu", "params"),
                delta=_number(table, "delta", "params"),
                gamma=_number(table, "gamma", "params"),
                z_a=z_a,
            )
        except DomainError as err:
            raise ConfigError(f"[params] {err}") from err
        return par, None
    if mode == "physical":
        allowed = ("mode", "z_a") + _PHYSICAL_KEYS + (
            "E_n", "E_p", "E_a", "N_n", "N_p", "N_a",
        )
        _reject_unknown(table, allowed, "params")
        values = {}
        for key in _PHYSICAL_KEYS:
            values[key] = _region_triple(_get(table, key, "params"), key, "params")
        for key in ("E_n", "E_p", "E_a"):
            values[key] = _region_triple(table.get(key, 0.0), key, "params")
        for key in ("N_n", "N_p", "N_a"):
            if key in table:
                values[key] = _region_triple(table[key], key, "params")
        for key in ("l", "T", "N_tilde", "N_a_tilde", "mu_tilde", "mu_a_tilde",
                    "F_ph", "alpha_g"):
            if not isinstance(values[key], float):
                raise ConfigError(f"[params] {key} must be a single number")
        z_a = table.get("z_a", 1)
        if isinstance(z_a, bool) or not isinstance(z_a, int):
            raise ConfigError("[params] z_a must be an integer")
        try:
            phys = PhysicalParams(**values)
            return nondimensionalize(phys, z_a=z_a), phys
        except DomainError as err:
            raise ConfigError(f"[params] {err}") from err
    raise ConfigError(f"[params] mode must be 'dimensionless' or 'physical', got {mode!r}")


def _parse_statistics(cfg):
    table = cfg.get("statistics", {})
    _reject_unknown(table, ("electrons", "holes", "anions"), "statistics")
    names = (
        _get(table, "electrons", "statistics", "boltzmann"),
        _get(table, "holes", "statistics", "boltzmann"),
        _get(table, "anions", "statistics", "fermi_dirac_minus_one"),
    )
    for name in names:
        if not isinstance(name, str):
            raise ConfigError(f"[statistics] entries must be strings, got {name!r}")
    return names


def _parse_doping(cfg, phys):
    table = cfg.get("doping", {})
    _reject_unknown(table, ("C",), "doping")
    value = _region_triple(table.get("C", 0.0), "C", "doping")
    if phys is not None:
        arr = np.asarray(value, dtype=float) / phys.N_tilde
        return float(arr) if arr.ndim == 0 else tuple(arr)
    return value


def _parse_generation(cfg, phys, breakpoints, mesh: Mesh):
    table = cfg.get("generation", {})
    _reject_unknown(table, ("kind", "value", "direction"), "generation")
    kind = _get(table, "kind", "generation", "zero")
    if kind == "zero":
        return 0.0
    if kind == "constant":
        value = _number(table, "value", "generation")
        if value < 0:
            raise ConfigError("[generation] value must be nonnegative")
        # photogeneration is confined to the absorber layer
        return (0.0, value, 0.0)
    if kind == "beer_lambert":
        if phys is None:
            raise ConfigError("[generation] beer_lambert needs physical parameters")
        direction = _get(table, "direction", "generation", "left")
        if direction not in ("left", "right"):
            raise ConfigError("[generation] direction must be 'left' or 'right'")
        # attenuation depth measured from the absorber's illuminated edge;
        # gamma carries the F_ph alpha_g l^2 / (mu U_T N) prefactor
        depth = mesh.cell_center - breakpoints[1]
        if direction == "right":
            depth = breakpoints[2] - mesh.cell_center
        profile = np.exp(-phys.alpha_g * phys.l * depth)
        profile[mesh.cell_region != 1] = 0.0
        return profile
    raise ConfigError(f"[generation] kind must be zero, constant, or beer_lambert, got {kind!r}")


def _parse_recombination(cfg):
    table = cfg.get("recombination", {})
    allowed = ("enabled", "r0", "tau_n", "tau_p", "n_n_tau", "n_p_tau",
               "srh_standard_lifetimes")
    _reject_unknown(table, allowed, "recombination")
    enabled = _get(table, "enabled", "recombination", False)
    if not isinstance(enabled, bool):
        raise ConfigError("[recombination] enabled must be true or false")
    if not enabled:
        return RecombinationParams()
    flags = {}
    for key in ("r0", "tau_n", "tau_p", "n_n_tau", "n_p_tau"):
        if key in table:
            flags[key] = _number(table, key, "recombination")
    srh = table.get("srh_standard_lifetimes", False)
    if not isinstance(srh, bool):
        raise ConfigError("[recombination] srh_standard_lifetimes must be a boolean")
    return RecombinationParams(enabled=True, srh_standard_lifetimes=srh, **flags)


def _parse_mobilities(cfg, phys):
    table = cfg.get("mobilities", {})
    _reject_unknown(table, ("n", "p", "a"), "mobilities")
    out = {}
    for name in ("n", "p", "a"):
        if name not in table:
            continue
        value = _region_triple(table[name], name, "mobilities")
        if phys is not None:
            scale = phys.mu_a_tilde if name == "a" else phys.mu_tilde
            arr = np.asarray(value, dtype=float) / scale
            value = float(arr) if arr.ndim == 0 else tuple(arr)
        out[name] = value
    return out


def _boundary_value(raw, key, doping, region, volts_per_unit):
    """Number, or the whitelisted arcsinh formula over the contact doping."""
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return float(raw) / volts_per_unit
    if isinstance(raw, str):
        match = _FORMULA.fullmatch(raw.strip())
        if match is None:
            raise ConfigError(
                f"[dirichlet] {key}: only numbers or 'arcsinh_half_doping_plus(c)' are allowed"
            )
        try:
            offset = float(match.group(1))
        except ValueError:
            raise ConfigError(f"[dirichlet] {key}: bad constant in {raw!r}") from None
        c_side = np.asarray(doping, dtype=float)
        c_side = float(c_side) if c_side.ndim == 0 else float(c_side[region])
        return math.asinh(0.5 * c_side) + offset
    raise ConfigError(f"[dirichlet] {key} must be a number or formula string")


def _parse_dirichlet(cfg, doping, phys):
    table = _get(cfg, "dirichlet", "config")
    keys = ("phi_left", "phi_right", "psi_left", "psi_right")
    _reject_unknown(table, keys, "dirichlet")
    volts = phys.thermal_voltage if phys is not None else 1.0
    values = []
    for key in keys:
        region = 0 if key.endswith("left") else 2
        raw = _get(table, key, "dirichlet")
        if isinstance(raw, str) and phys is not None:
            raise ConfigError(f"[dirichlet] {key}: formulas apply to dimensionless configs only")
        values.append(_boundary_value(raw, key, doping, region, volts))
    return tuple(values)


def _parse_anions(cfg, mesh: Mesh, scale_a_cells):
    table = cfg.get("anions", {})
    _reject_unknown(table, ("mass_target", "mean_fill"), "anions")
    if "mass_target" in table and "mean_fill" in table:
        raise ConfigError("[anions] give mass_target or mean_fill, not both")
    if "mass_target" in table:
        return _number(table, "mass_target", "anions")
    if "mean_fill" in table:
        fill = _number(table, "mean_fill", "anions")
        if not (0.0 < fill < 1.0):
            raise ConfigError("[anions] mean_fill must lie strictly between 0 and 1")
        capacity = float(np.sum(mesh.cell_measure[mesh.intr_cells] * scale_a_cells))
        return fill * capacity
    return None


def _parse_initial(cfg):
    table = cfg.get("initial", {})
    _reject_unknown(table, ("kind", "amplitude", "path"), "initial")
    kind = _get(table, "kind", "initial", "constant")
    if kind not in ("sinusoidal", "quadratic", "constant", "from_file"):
        raise ConfigError(f"[initial] unknown kind {kind!r}")
    amplitude = None
    if "amplitude" in table:
        amplitude = _number(table, "amplitude", "initial")
    path = table.get("path")
    if kind == "from_file":
        if not isinstance(path, str):
            raise ConfigError("[initial] from_file needs a path string")
    elif path is not None:
        raise ConfigError("[initial] path applies to kind = 'from_file' only")
    return kind, amplitude, path


def _parse_time(cfg, seconds_per_unit):
    table = cfg.get("time")
    if table is None:
        return None
    _reject_unknown(table, ("t_start", "t_end", "dt"), "time")
    t_start = _number(table, "t_start", "time", 0.0)
    t_end = _number(table, "t_end", "time")
    dt = _get(table, "dt", "time")
    if isinstance(dt, list):
        steps = [
            _number({"dt": v}, "dt", "time") / seconds_per_unit for v in dt
        ]
    elif isinstance(dt, (int, float)) and not isinstance(dt, bool):
        steps = float(dt) / seconds_per_unit
    else:
        raise ConfigError("[time] dt must be a number or a list of numbers")
    return TimeGrid(t_start / seconds_per_unit, t_end / seconds_per_unit, steps)


def _parse_solver(cfg):
    table = cfg.get("solver", {})
    allowed = ("abs_tol", "rel_tol", "max_iters", "damping_initial",
               "damping_growth", "max_backtracks")
    _reject_unknown(table, allowed, "solver")
    flags = {}
    for key in ("abs_tol", "rel_tol", "damping_initial", "damping_growth"):
        if key in table:
            flags[key] = _number(table, key, "solver")
    for key in ("max_iters", "max_backtracks"):
        if key in table:
            value = table[key]
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"[solver] {key} must be an integer")
            flags[key] = value
    return NewtonOptions(**flags)


def _parse_outputs(cfg, seconds_per_unit):
    table = cfg.get("outputs", {})
    _reject_unknown(table, ("directory", "profiles_at", "plots", "steady"), "outputs")
    directory = _get(table, "directory", "outputs", "out")
    if not isinstance(directory, str):
        raise ConfigError("[outputs] directory must be a string")
    raw_times = _get(table, "profiles_at", "outputs", [])
    if not isinstance(raw_times, list):
        raise ConfigError("[outputs] profiles_at must be a list of times")
    times = []
    for value in raw_times:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("[outputs] profiles_at entries must be numbers")
        times.append(float(value) / seconds_per_unit)
    plots = _get(table, "plots", "outputs", True)
    steady = _get(table, "steady", "outputs", True)
    if not isinstance(plots, bool) or not isinstance(steady, bool):
        raise ConfigError("[outputs] plots and steady must be booleans")
    return OutputOptions(
        directory=directory, profiles_at=tuple(times), plots=plots, steady=steady
    )


def build_setup(cfg, label, config_text, nodes_per_region=None, out_dir=None) -> RunSetup:
    """Pure translation of a parsed TOML mapping into a RunSetup."""
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a table")
    _reject_unknown(cfg, _TOP_LEVEL, "config")
    for name in _TOP_LEVEL:
        if name in cfg and not isinstance(cfg[name], dict):
            raise ConfigError(f"[{name}] must be a table")

    params, phys = _parse_params(cfg)
    breakpoints, nodes = _parse_mesh(cfg)
    if nodes_per_region is not None:
        nodes = nodes_per_region
    if phys is not None:
        # physical breakpoints are in cm; the model runs on the unit domain
        span = breakpoints[3] - breakpoints[0]
        if abs(span - phys.l) > 1e-9 * phys.l:
            raise ConfigError(
                f"[mesh] breakpoints span {span:g} cm but [params] l = {phys.l:g} cm"
            )
        breakpoints = tuple((b - breakpoints[0]) / phys.l for b in breakpoints)
    mesh = build_three_layer_mesh(breakpoints, nodes)
    statistics = _parse_statistics(cfg)
    doping = _parse_doping(cfg, phys)
    generation = _parse_generation(cfg, phys, breakpoints, mesh)
    recombination = _parse_recombination(cfg)
    mobilities = _parse_mobilities(cfg, phys)
    dirichlet = _parse_dirichlet(cfg, doping, phys)

    density_scales = None
    band_shifts = None
    permittivity = 1.0
    if phys is not None:
        u_t = phys.thermal_voltage
        permittivity = tuple(as_region_values(phys.eps_s) / phys.eps_ref)
        band_shifts = {
            "n": tuple(as_region_values(phys.E_n) / u_t),
            "p": tuple(as_region_values(phys.E_p) / u_t),
            "a": tuple(as_region_values(phys.E_a) / u_t),
        }
        density_scales = {}
        for name, reference in (("n", phys.N_tilde), ("p", phys.N_tilde),
                                ("a", phys.N_a_tilde)):
            stated = getattr(phys, "N_" + name)
            if stated is not None:
                density_scales[name] = tuple(as_region_values(stated) / reference)

    scale_a_value = 1.0
    if density_scales and "a" in density_scales:
        scale_a_value = density_scales["a"]
    scale_a_cells = np.asarray(scale_a_value, dtype=float)
    if scale_a_cells.ndim == 1:
        scale_a_cells = scale_a_cells[mesh.cell_region[mesh.intr_cells]]
    else:
        scale_a_cells = np.full(mesh.n_intr, float(scale_a_cells))
    mass_target = _parse_anions(cfg, mesh, scale_a_cells)

    scenario = make_scenario(
        mesh, params,
        statistics=statistics,
        doping=doping,
        generation=generation,
        recombination=recombination,
        dirichlet=dirichlet,
        density_scales=density_scales,
        band_shifts=band_shifts,
        mobilities=mobilities,
        permittivity=permittivity,
        anion_mass_target=mass_target,
        dimensional=phys,
    )

    seconds_per_unit = 1.0
    if phys is not None:
        seconds_per_unit = phys.l ** 2 / (phys.mu_a_tilde * phys.thermal_voltage)

    kind, amplitude, path = _parse_initial(cfg)
    grid = _parse_time(cfg, seconds_per_unit)
    solver = _parse_solver(cfg)
    outputs = _parse_outputs(cfg, seconds_per_unit)
    if out_dir is not None:
        outputs = OutputOptions(
            directory=out_dir, profiles_at=outputs.profiles_at,
            plots=outputs.plots, steady=outputs.steady,
        )
    return RunSetup(
        scenario=scenario,
        grid=grid,
        solver=solver,
        initial_kind=kind,
        initial_amplitude=amplitude,
        initial_path=path,
        outputs=outputs,
        time_scale=seconds_per_unit,
        label=label,
        config_text=config_text,
    )


def load_config(path, nodes_per_region=None, out_dir=None) -> RunSetup:
    """Read and translate one TOML config file."""
    try:
        with open(path, "rb") as handle:
            raw = handle.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = tomli.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, tomli.TOMLDecodeError) as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    label = re.sub(r"\.toml\Z", "", str(path).replace("\\", "/").rsplit("/", 1)[-1])
    return build_setup(
        cfg, label, raw.decode("utf-8"),
        nodes_per_region=nodes_per_region, out_dir=out_dir,
    )
