"""Scenario: mesh plus model data, ready for assembly.

A scenario bundles the mesh with the dimensionless groups, per-carrier
statistics, doping/generation/recombination data, Dirichlet boundary
data (linear interpolants evaluated at cell centers, exact for the
constant and linear data in use), and the optional region-wise density
scales N-hat, band-edge shifts E-hat, mobility and permittivity
prefactors that a device scenario needs.  Everything is immutable after
construction and shared read-only by solvers and diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .mesh import FaceKind, Mesh, Region
from .physics import DimensionlessParams, FieldData, RecombinationParams, Z_N, Z_P
from .statistics import Statistics, make_statistics

__all__ = [
    "Species",
    "Scenario",
    "make_scenario",
    "per_cell_values",
    "per_face_values",
    "initial_quasi_fermi",
]


def per_cell_values(mesh: Mesh, value):
    """Scalar, (HTL, intrinsic, ETL) triple, or per-cell array -> per-cell array."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(mesh.n_cells, float(arr))
    if arr.shape == (3,):
        return arr[mesh.cell_region]
    if arr.shape == (mesh.n_cells,):
        return arr.copy()
    raise ConfigError(f"cannot map value of shape {arr.shape} onto {mesh.n_cells} cells")


def per_face_values(mesh: Mesh, value):
    """Region-wise coefficients sampled on faces.

    A face strictly inside a layer takes that layer's value; the two
    layer-interface faces average their neighbors' values; boundary
    faces take the adjacent cell's value.
    """
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(len(mesh.faces), float(arr))
    if arr.shape != (3,):
        raise ConfigError(f"face coefficients need a scalar or 3 region values, got {arr.shape}")
    left = arr[mesh.cell_region[mesh.face_cell_k]]
    right = arr[mesh.cell_region[np.where(mesh.face_cell_l >= 0, mesh.face_cell_l, mesh.face_cell_k)]]
    return 0.5 * (left + right)


@dataclass(frozen=True)
class Species:
    """One carrier's state-equation data over its supporting cells."""

    name: str
    z: int
    stat: Statistics
    cells: np.ndarray  # global indices of the supporting cells
    scale: np.ndarray  # density scale N-hat per supporting cell
    shift: np.ndarray  # band-edge shift E-hat per supporting cell
    mobility_face: np.ndarray  # prefactor per face (global numbering)

    def eta(self, phi, psi_on_support):
        return self.z * (phi + self.shift - psi_on_support)

    def density(self, phi, psi_on_support):
        return self.scale * self.stat.eval(self.eta(phi, psi_on_support))


@dataclass
class Scenario:
    mesh: Mesh
    params: DimensionlessParams
    stat_n: Statistics
    stat_p: Statistics
    stat_a: Statistics
    fields: FieldData
    # Dirichlet boundary data: (left, right) endpoint values
    phi_D: tuple
    psi_D: tuple
    # state-equation data
    scale_n: np.ndarray = None
    scale_p: np.ndarray = None
    scale_a: np.ndarray = None  # over intrinsic cells
    shift_n: np.ndarray = None
    shift_p: np.ndarray = None
    shift_a: np.ndarray = None
    # face prefactors
    permittivity_face: np.ndarray = None
    mobility_n_face: np.ndarray = None
    mobility_p_face: np.ndarray = None
    mobility_a_face: np.ndarray = None
    anion_mass_target: float = None
    dimensional: object = None  # PhysicalParams for device scenarios
    # derived, filled in __post_init__
    phi_D_cells: np.ndarray = field(default=None, repr=False)
    psi_D_cells: np.ndarray = field(default=None, repr=False)
    n_D_n_cells: np.ndarray = field(default=None, repr=False)
    n_D_p_cells: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        mesh = self.mesh
        ones_c = np.ones(mesh.n_cells)
        ones_i = np.ones(mesh.n_intr)
        ones_f = np.ones(len(mesh.faces))
        defaults = dict(
            scale_n=ones_c, scale_p=ones_c, scale_a=ones_i,
            shift_n=0.0 * ones_c, shift_p=0.0 * ones_c, shift_a=0.0 * ones_i,
            permittivity_face=ones_f, mobility_n_face=ones_f,
            mobility_p_face=ones_f, mobility_a_face=ones_f,
        )
        for name, value in defaults.items():
            if getattr(self, name) is None:
                setattr(self, name, value.copy())
        self.phi_D_cells = self._interpolate_boundary(self.phi_D)
        self.psi_D_cells = self._interpolate_boundary(self.psi_D)
        eta_n = Z_N * (self.phi_D_cells + self.shift_n - self.psi_D_cells)
        eta_p = Z_P * (self.phi_D_cells + self.shift_p - self.psi_D_cells)
        self.n_D_n_cells = self.scale_n * self.stat_n.eval(eta_n)
        self.n_D_p_cells = self.scale_p * self.stat_p.eval(eta_p)

    def _interpolate_boundary(self, pair):
        left, right = pair
        x0, x3 = self.mesh.breakpoints[0], self.mesh.breakpoints[3]
        return left + (right - left) * (self.mesh.cell_center - x0) / (x3 - x0)

    def species(self, name: str) -> Species:
        mesh = self.mesh
        if name == "n":
            return Species("n", Z_N, self.stat_n, np.arange(mesh.n_cells),
                           self.scale_n, self.shift_n, self.mobility_n_face)
        if name == "p":
            return Species("p", Z_P, self.stat_p, np.arange(mesh.n_cells),
                           self.scale_p, self.shift_p, self.mobility_p_face)
        if name == "a":
            return Species("a", self.params.z_a, self.stat_a, mesh.intr_cells,
                           self.scale_a, self.shift_a, self.mobility_a_face)
        raise ConfigError(f"unknown species {name!r}")

    def carriers(self):
        return self.species("n"), self.species("p")

    def dirichlet_trace(self, name: str):
        """(phi_D, psi_D, n_D) at the (left, right) Dirichlet faces."""
        sp = self.species(name)
        if name == "a":
            raise ConfigError("anion vacancies carry no Dirichlet data")
        shift = np.array([sp.shift[0], sp.shift[-1]])
        scale = np.array([sp.scale[0], sp.scale[-1]])
        phi = np.asarray(self.phi_D, dtype=float)
        psi = np.asarray(self.psi_D, dtype=float)
        n = scale * sp.stat.eval(sp.z * (phi + shift - psi))
        return phi, psi, n


def make_scenario(
    mesh: Mesh,
    params: DimensionlessParams,
    statistics=("boltzmann", "boltzmann", "fermi_dirac_minus_one"),
    doping=0.0,
    generation=0.0,
    recombination: RecombinationParams = None,
    dirichlet=(0.0, 0.0, 0.0, 0.0),
    density_scales=None,
    band_shifts=None,
    mobilities=None,
    permittivity=1.0,
    anion_mass_target=None,
    dimensional=None,
) -> Scenario:
    """Assemble a Scenario from region-wise or per-cell data.

    `statistics` names the (electron, hole, anion) statistics;
    `dirichlet` is (phi_left, phi_right, psi_left, psi_right);
    `density_scales`, `band_shifts`, `mobilities` are optional dicts
    keyed by species name with scalar or region-wise values.
    """
    stats = [s if isinstance(s, Statistics) else make_statistics(s) for s in statistics]
    fields = FieldData(
        doping_C=per_cell_values(mesh, doping),
        generation_G=per_cell_values(mesh, generation),
        recombination=recombination or RecombinationParams(),
    )
    scales = dict(density_scales or {})
    shifts = dict(band_shifts or {})
    mobs = dict(mobilities or {})

    def on_cells(table, name, default):
        return per_cell_values(mesh, table.get(name, default))

    phi_l, phi_r, psi_l, psi_r = (float(v) for v in dirichlet)
    return Scenario(
        mesh=mesh,
        params=params,
        stat_n=stats[0], stat_p=stats[1], stat_a=stats[2],
        fields=fields,
        phi_D=(phi_l, phi_r),
        psi_D=(psi_l, psi_r),
        scale_n=on_cells(scales, "n", 1.0),
        scale_p=on_cells(scales, "p", 1.0),
        scale_a=on_cells(scales, "a", 1.0)[mesh.intr_cells],
        shift_n=on_cells(shifts, "n", 0.0),
        shift_p=on_cells(shifts, "p", 0.0),
        shift_a=on_cells(shifts, "a", 0.0)[mesh.intr_cells],
        permittivity_face=per_face_values(mesh, permittivity),
        mobility_n_face=per_face_values(mesh, mobs.get("n", 1.0)),
        mobility_p_face=per_face_values(mesh, mobs.get("p", 1.0)),
        mobility_a_face=per_face_values(mesh, mobs.get("a", 1.0)),
        anion_mass_target=anion_mass_target,
        dimensional=dimensional,
    )


def initial_quasi_fermi(scenario: Scenario, kind: str, amplitude: float = None):
    """Named initial quasi Fermi profiles (phi_n0, phi_p0, phi_a0).

    `sinusoidal`: boundary interpolant plus A sin(pi x / L), default
    A = 0.5; `quadratic`: interpolant plus A x (L - x)/L^2, default
    A = 1; `constant`: the interpolant itself.  Both bumps vanish at the
    contacts, so the initial data honor the boundary values.  The anion
    potential starts constant at the average of the two boundary values.
    """
    mesh = scenario.mesh
    x = mesh.cell_center - mesh.breakpoints[0]
    length = mesh.domain_length
    base = scenario.phi_D_cells
    if kind == "sinusoidal":
        a = 0.5 if amplitude is None else amplitude
        bump = a * np.sin(np.pi * x / length)
    elif kind == "quadratic":
        a = 1.0 if amplitude is None else amplitude
        bump = a * x * (length - x) / length**2
    elif kind == "constant":
        bump = np.zeros_like(x)
    else:
        raise ConfigError(f"unknown initial profile {kind!r}")
    phi0 = base + bump
    phi_a0 = np.full(mesh.n_intr, 0.5 * (scenario.phi_D[0] + scenario.phi_D[1]))
    return phi0, phi0.copy(), phi_a0
