"""Per-step diagnostics: entropy, dissipation, distance to steady state.

All quantities are discrete functionals of a single state on the
scenario's mesh.  The entropy is relative to the Dirichlet boundary
data; the steady-state variants replace the boundary data by a computed
stationary solution.  Densities with a region-wise scale N-hat use the
scaled entropy N-hat Phi(n / N-hat), whose Bregman distance is
N-hat h(x / N-hat, y / N-hat); for the dimensionless experiments all
scales are one and this reduces to the plain formulas.

This module deliberately knows nothing about the solvers; `system`
imports it to emit records during time stepping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, MeshMismatch
from .flux import interface_density_core
from .mesh import FaceKind
from .physics import BOLTZMANN_CONSTANT, recombination_rate
from .statistics import relative_entropy_h

__all__ = [
    "DiagnosticsRecord",
    "discrete_entropy",
    "discrete_dissipation",
    "entropy_vs_steady",
    "l2_error_sq",
    "anion_mass",
    "make_record",
    "fit_exponential_decay",
    "L2_FIELDS",
]

L2_FIELDS = ("psi", "phi_n", "phi_p", "phi_a", "n_n", "n_p", "n_a")


@dataclass
class DiagnosticsRecord:
    time: float
    entropy_E_T: float
    dissipation_D_T: float
    anion_mass: float
    entropy_vs_steady_E_inf: float = None
    l2_errors: dict = None
    free_energy_dimensional: float = None


def _check_same_mesh(state, other, scenario):
    for a, b in ((state.psi, other.psi), (state.phi_a, other.phi_a)):
        if a.shape != b.shape:
            raise MeshMismatch(f"states live on different meshes: {a.shape} vs {b.shape}")
    if state.psi.shape != (scenario.mesh.n_cells,):
        raise MeshMismatch("state does not match the scenario mesh")


def _electric_term(scenario, u, u_trace, half_lam2):
    """half_lam2 * sum_sigma eps_sigma tau_sigma (D_sigma u)^2 over all faces."""
    mesh = scenario.mesh
    interior = mesh.face_kind == int(FaceKind.INTERIOR)
    dirichlet = mesh.face_kind == int(FaceKind.DIRICHLET)
    w = scenario.permittivity_face * mesh.face_tau
    du_int = u[mesh.face_cell_l[interior]] - u[mesh.face_cell_k[interior]]
    du_bnd = u_trace - u[mesh.face_cell_k[dirichlet]]
    return half_lam2 * (np.sum(w[interior] * du_int ** 2) + np.sum(w[dirichlet] * du_bnd ** 2))


def _scaled_h(species, n_self, n_ref):
    return species.scale * relative_entropy_h(
        species.stat, n_self / species.scale, n_ref / species.scale
    )


def discrete_entropy(state, scenario) -> float:
    """Relative entropy with respect to the Dirichlet boundary data.

    Electric energy of psi minus the affine boundary interpolant, the
    anion mixing entropy on the intrinsic layer, and the carrier
    relative entropies against the densities the boundary data would
    impose on every cell.
    """
    mesh = scenario.mesh
    par = scenario.params
    sp_n, sp_p = scenario.carriers()
    sp_a = scenario.species("a")

    u = state.psi - scenario.psi_D_cells
    total = _electric_term(scenario, u, np.zeros(2), 0.5 * par.lam2)

    n_a = sp_a.density(state.phi_a, state.psi[sp_a.cells])
    m_a = mesh.cell_measure[sp_a.cells]
    total += np.sum(m_a * sp_a.scale * sp_a.stat.phi(n_a / sp_a.scale))

    m_k = mesh.cell_measure
    for sp_c, phi, n_ref in (
        (sp_n, state.phi_n, scenario.n_D_n_cells),
        (sp_p, state.phi_p, scenario.n_D_p_cells),
    ):
        n_c = sp_c.density(phi, state.psi)
        total += par.delta * np.sum(m_k * _scaled_h(sp_c, n_c, n_ref))
    return float(total)


def _face_dissipation(scenario, species, phi, psi, faces_mask, with_boundary):
    """sum over masked faces of tau-hat nbar (D phi)^2 for one species."""
    mesh = scenario.mesh
    n = species.density(phi, psi[species.cells])
    log_n = np.log(n)
    tau_hat = mesh.face_tau * species.mobility_face

    interior = faces_mask & (mesh.face_kind == int(FaceKind.INTERIOR))
    loc = mesh.intr_index_of_cell if species.name == "a" else np.arange(mesh.n_cells)
    ik = loc[mesh.face_cell_k[interior]]
    il = loc[mesh.face_cell_l[interior]]
    q = species.z * (phi[il] - phi[ik]) - (log_n[il] - log_n[ik])
    nbar = interface_density_core(n[ik], n[il], log_n[ik], log_n[il], q)
    dphi = phi[il] - phi[ik]
    total = np.sum(tau_hat[interior] * nbar * dphi ** 2)

    if with_boundary:
        dirichlet = mesh.face_kind == int(FaceKind.DIRICHLET)
        kd = mesh.face_cell_k[dirichlet]
        phi_tr, _, n_tr = scenario.dirichlet_trace(species.name)
        q_b = species.z * (phi_tr - phi[kd]) - (np.log(n_tr) - log_n[kd])
        nbar_b = interface_density_core(n[kd], n_tr, log_n[kd], np.log(n_tr), q_b)
        dphi_b = phi_tr - phi[kd]
        total += np.sum(tau_hat[dirichlet] * nbar_b * dphi_b ** 2)
    return total


def discrete_dissipation(state, scenario) -> float:
    """Entropy production rate of a state: migration plus recombination."""
    mesh = scenario.mesh
    par = scenario.params
    sp_n, sp_p = scenario.carriers()
    sp_a = scenario.species("a")

    all_faces = np.ones(len(mesh.faces), dtype=bool)
    total = 0.0
    for sp_c, phi in ((sp_n, state.phi_n), (sp_p, state.phi_p)):
        total += (par.delta / (2.0 * par.nu)) * _face_dissipation(
            scenario, sp_c, phi, state.psi, all_faces, with_boundary=True
        )
    total += 0.5 * sp_a.z ** 2 * _face_dissipation(
        scenario, sp_a, state.phi_a, state.psi, mesh.face_intr_interior, with_boundary=False
    )

    rec = scenario.fields.recombination
    if rec is not None and rec.enabled:
        n_n = sp_n.density(state.phi_n, state.psi)
        n_p = sp_p.density(state.phi_p, state.psi)
        r = recombination_rate(rec, n_n, n_p, state.phi_n, state.phi_p)
        total += (par.delta / par.nu) * np.sum(
            mesh.cell_measure * r * (state.phi_p - state.phi_n)
        )
    return float(total)


def entropy_vs_steady(state, steady, scenario, dimensional: bool = False) -> float:
    """Relative entropy of a state against a stationary solution.

    The dimensional form rescales to an energy per unit contact area,
    k_B T N-tilde_a l E, with the same face-wise permittivity weights; the
    linear band-edge contributions to the entropy densities cancel in the
    Bregman distance, so the formulas coincide up to that single factor.
    """
    _check_same_mesh(state, steady, scenario)
    mesh = scenario.mesh
    par = scenario.params
    sp_a = scenario.species("a")

    u = state.psi - steady.psi
    total = _electric_term(scenario, u, np.zeros(2), 0.5 * par.lam2)

    m_a = mesh.cell_measure[sp_a.cells]
    n_a = sp_a.density(state.phi_a, state.psi[sp_a.cells])
    n_a_inf = sp_a.density(steady.phi_a, steady.psi[sp_a.cells])
    total += np.sum(m_a * _scaled_h(sp_a, n_a, n_a_inf))

    for sp_c, phi, phi_inf in (
        (scenario.species("n"), state.phi_n, steady.phi_n),
        (scenario.species("p"), state.phi_p, steady.phi_p),
    ):
        n_c = sp_c.density(phi, state.psi)
        n_inf = sp_c.density(phi_inf, steady.psi)
        total += par.delta * np.sum(mesh.cell_measure * _scaled_h(sp_c, n_c, n_inf))

    if not dimensional:
        return float(total)
    phys = scenario.dimensional
    if phys is None:
        raise DomainError("dimensional entropy requires a scenario with physical parameters")
    return float(BOLTZMANN_CONSTANT * phys.T * phys.N_a_tilde * phys.l * total)


def l2_error_sq(state, steady, scenario, field_name: str) -> float:
    """Squared cellwise L2 distance over the field's support."""
    _check_same_mesh(state, steady, scenario)
    mesh = scenario.mesh
    if field_name not in L2_FIELDS:
        raise DomainError(f"unknown field {field_name!r}; expected one of {L2_FIELDS}")

    def extract(st, name):
        if name == "psi":
            return st.psi
        if name in ("phi_n", "phi_p", "phi_a"):
            return getattr(st, name)
        sp_c = scenario.species(name[-1])
        phi = getattr(st, "phi_" + name[-1])
        return sp_c.density(phi, st.psi[sp_c.cells])

    u = extract(state, field_name)
    v = extract(steady, field_name)
    measures = mesh.cell_measure if u.size == mesh.n_cells else mesh.cell_measure[mesh.intr_cells]
    return float(np.sum(measures * (u - v) ** 2))


def anion_mass(state, scenario) -> float:
    """Total vacancy content of the intrinsic layer."""
    sp_a = scenario.species("a")
    n_a = sp_a.density(state.phi_a, state.psi[sp_a.cells])
    return float(np.sum(scenario.mesh.cell_measure[sp_a.cells] * n_a))


def make_record(scenario, state, steady=None) -> DiagnosticsRecord:
    record = DiagnosticsRecord(
        time=state.time,
        entropy_E_T=discrete_entropy(state, scenario),
        dissipation_D_T=discrete_dissipation(state, scenario),
        anion_mass=anion_mass(state, scenario),
    )
    if steady is not None:
        record.entropy_vs_steady_E_inf = entropy_vs_steady(state, steady, scenario)
        record.l2_errors = {
            name: l2_error_sq(state, steady, scenario, name) for name in L2_FIELDS
        }
        if scenario.dimensional is not None:
            record.free_energy_dimensional = entropy_vs_steady(
                state, steady, scenario, dimensional=True
            )
    return record


def fit_exponential_decay(times, values, window=(1e-12, 0.1)):
    """Least-squares line through log(values) on the decay window.

    The window keeps points with value in [window[0]*peak, window[1]*peak],
    cutting both the initial transient and the machine-precision floor.
    Returns (slope, intercept, r_squared, mask).
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    peak = np.max(v)
    if not (peak > 0):
        raise DomainError("decay fit needs positive values")
    mask = (v >= window[0] * peak) & (v <= window[1] * peak) & (v > 0)
    if np.count_nonzero(mask) < 3:
        raise DomainError("decay window holds fewer than 3 points")
    x, y = t[mask], np.log(v[mask])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2), mask
