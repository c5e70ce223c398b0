"""Fully discrete system: assembly, damped Newton, and the solvers.

Each backward-Euler step solves the coupled nonlinear system in the
unknowns (phi_n, phi_p, phi_a on intrinsic cells, psi), interleaved per
cell to keep the Jacobian banded.  The residual rows are the electron
and hole mass balances on every cell, the anion mass balance on
intrinsic cells, and the Poisson equation; densities always come from
the state equation n = N-hat F(z (phi + E-hat - psi)).

Beyond the time step solver, this module provides the decoupled
nonlinear Poisson solve (used to initialize psi and for equilibrium),
the thermodynamic-equilibrium solve (nested scalar root find on a
constant anion potential), the stationary solve (pseudo-transient
continuation plus a mass-constrained stationary Newton), and the time
loop with step bisection on solver failure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
from scipy.linalg import solve_banded
from scipy.optimize import brentq
from scipy.sparse.linalg import spsolve

from . import diagnostics
from .errors import ConfigError, MassOutOfRange, NoConvergence, StepFailure
from .flux import bernoulli, bernoulli_deriv
from .mesh import FaceKind
from .physics import recombination_partials
from .scenario import Scenario

__all__ = [
    "State",
    "ResidualSystem",
    "NewtonOptions",
    "TimeGrid",
    "Layout",
    "TransientResult",
    "assemble_residual",
    "newton_solve",
    "solve_poisson_given_qfp",
    "solve_equilibrium",
    "solve_steady_state",
    "prepare_initial_state",
    "run_transient",
]

# state-equation arguments are kept inside this window so densities stay
# positive and finite through every Newton iterate
ETA_LIMIT = 700.0
ETA_TRUST = 40.0  # max eta movement per Newton step; keeps flux ratios comparable


@dataclass
class State:
    psi: np.ndarray
    phi_n: np.ndarray
    phi_p: np.ndarray
    phi_a: np.ndarray  # intrinsic cells only
    time: float = 0.0

    def copy(self):
        return State(self.psi.copy(), self.phi_n.copy(), self.phi_p.copy(),
                     self.phi_a.copy(), self.time)


@dataclass
class ResidualSystem:
    residual: np.ndarray
    jacobian: object  # csr matrix, None when assembled residual-only
    fluxes: dict  # species name -> per-face flux seen from the lower cell


@dataclass(frozen=True)
class NewtonOptions:
    abs_tol: float = 1e-11
    rel_tol: float = 1e-13
    max_iters: int = 60
    damping_initial: float = 1.0
    damping_growth: float = 2.0
    max_backtracks: int = 12

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ConfigError("Newton tolerances must be positive")
        if not (0 < self.damping_initial <= 1 and self.damping_growth >= 1):
            raise ConfigError("damping_initial in (0,1], damping_growth >= 1")


@dataclass(frozen=True)
class TimeGrid:
    t_start: float
    t_end: float
    step_tau: object  # uniform step or explicit list

    def steps(self):
        span = self.t_end - self.t_start
        if span <= 0:
            raise ConfigError("t_end must exceed t_start")
        taus = np.atleast_1d(np.asarray(self.step_tau, dtype=float))
        if taus.size == 1:
            count = int(round(span / taus[0]))
            taus = np.full(max(count, 1), taus[0])
        if np.any(taus <= 0):
            raise ConfigError("time steps must be positive")
        if abs(taus.sum() - span) > 1e-8 * max(1.0, abs(span)):
            raise ConfigError("time steps do not fill [t_start, t_end]")
        return taus


class Layout:
    """Interleaved per-cell unknown numbering [phi_n, phi_p, (phi_a), psi]."""

    def __init__(self, mesh):
        self.mesh = mesh
        intr = mesh.cell_region == 1
        width = np.where(intr, 4, 3)
        offsets = np.concatenate([[0], np.cumsum(width)[:-1]])
        self.idx_n = offsets
        self.idx_p = offsets + 1
        idx_a_full = np.where(intr, offsets + 2, -1)
        self.idx_a_full = idx_a_full
        self.idx_a = idx_a_full[mesh.intr_cells]
        self.idx_psi = offsets + width - 1
        self.n_dof = int(width.sum())

    def pack(self, state: State):
        x = np.empty(self.n_dof)
        x[self.idx_n] = state.phi_n
        x[self.idx_p] = state.phi_p
        x[self.idx_a] = state.phi_a
        x[self.idx_psi] = state.psi
        return x

    def unpack(self, x, time):
        return State(psi=x[self.idx_psi].copy(), phi_n=x[self.idx_n].copy(),
                     phi_p=x[self.idx_p].copy(), phi_a=x[self.idx_a].copy(),
                     time=time)


class _Triplets:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add(self, r, c, v):
        r, c, v = np.broadcast_arrays(r, c, v)
        self.rows.append(np.asarray(r, dtype=np.int64).ravel())
        self.cols.append(np.asarray(c, dtype=np.int64).ravel())
        self.vals.append(np.asarray(v, dtype=float).ravel())

    def matrix(self, n):
        rows = np.concatenate(self.rows)
        cols = np.concatenate(self.cols)
        vals = np.concatenate(self.vals)
        return sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def _cell_data(species, phi, psi):
    psi_s = psi[species.cells]
    eta = species.eta(phi, psi_s)
    f = species.stat.eval(eta)
    fp = species.stat.deriv(eta)
    n = species.scale * f
    return dict(
        eta=eta,
        n=n,
        log_n=np.log(n),
        g=fp / f,  # d(log F)/d eta
        dn=species.z * species.scale * fp,  # dn/dphi = -dn/dpsi
        # band shifts act through eta only; flat phi must carry zero flux
        u=species.z * phi - np.log(n),
        phi_eff=phi,
    )


def _flux_block(trip, res, z, tau_hat, dK, dL, rows_k, rows_l,
                col_phi_k, col_phi_l, col_psi_k, col_psi_l, with_jacobian):
    """One batch of faces; dL entries are plain arrays for boundary traces."""
    q = dL["u"] - dK["u"]
    dphi = dL["phi_eff"] - dK["phi_eff"]
    b_p, b_m = bernoulli(q), bernoulli(-q)
    j = np.where(dphi == 0.0, 0.0, -z * tau_hat * (b_m * dL["n"] - b_p * dK["n"]))
    np.add.at(res, rows_k, j)
    if rows_l is not None:
        np.add.at(res, rows_l, -j)
    if with_jacobian:
        s = bernoulli_deriv(-q) * dL["n"] + bernoulli_deriv(q) * dK["n"]
        z2t = z * z * tau_hat
        d_phi_k = -z2t * (s * (1.0 - dK["g"]) - b_p * dK["n"] * dK["g"])
        d_psi_k = -z2t * dK["g"] * (s + b_p * dK["n"])
        trip.add(rows_k, col_phi_k, d_phi_k)
        trip.add(rows_k, col_psi_k, d_psi_k)
        if rows_l is not None:
            d_phi_l = z2t * (s * (1.0 - dL["g"]) - b_m * dL["n"] * dL["g"])
            d_psi_l = z2t * dL["g"] * (s + b_m * dL["n"])
            trip.add(rows_k, col_phi_l, d_phi_l)
            trip.add(rows_k, col_psi_l, d_psi_l)
            for col, val in ((col_phi_k, d_phi_k), (col_phi_l, d_phi_l),
                             (col_psi_k, d_psi_k), (col_psi_l, d_psi_l)):
                trip.add(rows_l, col, -val)
    return j


def assemble_residual(state_new: State, state_old: State, tau_m, scenario: Scenario,
                      layout: Layout = None, with_jacobian: bool = True) -> ResidualSystem:
    """Residual and Jacobian of one backward-Euler step.

    `tau_m = inf` drops the time-difference terms and yields the
    stationary system.
    """
    mesh = scenario.mesh
    layout = layout or Layout(mesh)
    par = scenario.params
    inv_tau = 0.0 if np.isinf(tau_m) else 1.0 / tau_m
    m_k = mesh.cell_measure
    res = np.zeros(layout.n_dof)
    trip = _Triplets() if with_jacobian else None

    sp_n, sp_p = scenario.carriers()
    sp_a = scenario.species("a")
    dn_ = _cell_data(sp_n, state_new.phi_n, state_new.psi)
    dp_ = _cell_data(sp_p, state_new.phi_p, state_new.psi)
    da_ = _cell_data(sp_a, state_new.phi_a, state_new.psi)
    n_old = sp_n.density(state_old.phi_n, state_old.psi)
    p_old = sp_p.density(state_old.phi_p, state_old.psi)
    a_old = sp_a.density(state_old.phi_a, state_old.psi[sp_a.cells])

    # recombination and its chain-rule pieces
    rec = scenario.fields.recombination
    r_val, dr_nn, dr_np, dr_fn, dr_fp = recombination_partials(
        rec, dn_["n"], dp_["n"], state_new.phi_n, state_new.phi_p
    )
    gen = par.gamma * scenario.fields.generation_G

    # carrier mass balances: nu z m dn/tau + sum J - z m (gamma G - R)
    for sp_c, d, old, row, row_other, dr_self, dr_other, dr_phi_self, dr_phi_other in (
        (sp_n, dn_, n_old, layout.idx_n, layout.idx_p, dr_nn, dr_np, dr_fn, dr_fp),
        (sp_p, dp_, p_old, layout.idx_p, layout.idx_n, dr_np, dr_nn, dr_fp, dr_fn),
    ):
        z = sp_c.z
        res[row] += par.nu * z * m_k * (d["n"] - old) * inv_tau - z * m_k * (gen - r_val)
        if with_jacobian:
            other = dp_ if sp_c.name == "n" else dn_
            trip.add(row, row, par.nu * z * m_k * inv_tau * d["dn"]
                     + z * m_k * (dr_self * d["dn"] + dr_phi_self))
            trip.add(row, row_other, z * m_k * (dr_other * other["dn"] + dr_phi_other))
            trip.add(row, layout.idx_psi, -par.nu * z * m_k * inv_tau * d["dn"]
                     - z * m_k * (dr_self * d["dn"] + dr_other * other["dn"]))

    # anion mass balance on intrinsic cells
    z_a = sp_a.z
    m_a = m_k[sp_a.cells]
    res[layout.idx_a] += z_a * m_a * (da_["n"] - a_old) * inv_tau
    if with_jacobian:
        trip.add(layout.idx_a, layout.idx_a, z_a * m_a * inv_tau * da_["dn"])
        trip.add(layout.idx_a, layout.idx_psi[sp_a.cells], -z_a * m_a * inv_tau * da_["dn"])

    # Poisson: -lam^2 sum tau_sigma eps_sigma D psi - charge
    lam2 = par.lam2
    fk, fl = mesh.face_cell_k, mesh.face_cell_l
    interior = mesh.face_kind == int(FaceKind.INTERIOR)
    dirichlet = mesh.face_kind == int(FaceKind.DIRICHLET)
    cond = lam2 * mesh.face_tau * scenario.permittivity_face
    ki, li = fk[interior], fl[interior]
    ci = cond[interior]
    dpsi = state_new.psi[li] - state_new.psi[ki]
    np.add.at(res, layout.idx_psi[ki], -ci * dpsi)
    np.add.at(res, layout.idx_psi[li], ci * dpsi)
    kd = fk[dirichlet]
    cd = cond[dirichlet]
    psi_trace = np.asarray(scenario.psi_D, dtype=float)
    res[layout.idx_psi[kd]] += -cd * (psi_trace - state_new.psi[kd])
    charge = par.delta * (sp_n.z * dn_["n"] + sp_p.z * dp_["n"] + scenario.fields.doping_C)
    res[layout.idx_psi] += -m_k * charge
    res[layout.idx_psi[sp_a.cells]] += -m_a * z_a * da_["n"]
    if with_jacobian:
        trip.add(layout.idx_psi[ki], layout.idx_psi[ki], ci)
        trip.add(layout.idx_psi[ki], layout.idx_psi[li], -ci)
        trip.add(layout.idx_psi[li], layout.idx_psi[li], ci)
        trip.add(layout.idx_psi[li], layout.idx_psi[ki], -ci)
        trip.add(layout.idx_psi[kd], layout.idx_psi[kd], cd)
        trip.add(layout.idx_psi, layout.idx_n, -par.delta * m_k * sp_n.z * dn_["dn"])
        trip.add(layout.idx_psi, layout.idx_p, -par.delta * m_k * sp_p.z * dp_["dn"])
        trip.add(layout.idx_psi, layout.idx_psi,
                 par.delta * m_k * (sp_n.z * dn_["dn"] + sp_p.z * dp_["dn"]))
        trip.add(layout.idx_psi[sp_a.cells], layout.idx_a, -m_a * z_a * da_["dn"])
        trip.add(layout.idx_psi[sp_a.cells], layout.idx_psi[sp_a.cells], m_a * z_a * da_["dn"])

    # carrier fluxes
    fluxes = {}
    for sp_c, d, row_of in ((sp_n, dn_, layout.idx_n), (sp_p, dp_, layout.idx_p)):
        tau_hat = mesh.face_tau * sp_c.mobility_face
        flux = np.zeros(len(mesh.faces))

        def sub(dd, idx):
            return {k: dd[k][idx] for k in ("n", "u", "g", "phi_eff")}

        flux[interior] = _flux_block(
            trip, res, sp_c.z, tau_hat[interior], sub(d, ki), sub(d, li),
            row_of[ki], row_of[li],
            row_of[ki], row_of[li], layout.idx_psi[ki], layout.idx_psi[li],
            with_jacobian,
        )
        phi_tr, psi_tr, n_tr = scenario.dirichlet_trace(sp_c.name)
        trace = dict(
            n=n_tr, g=np.zeros(2), u=sp_c.z * phi_tr - np.log(n_tr),
            phi_eff=phi_tr,
        )
        flux[dirichlet] = _flux_block(
            trip, res, sp_c.z, tau_hat[dirichlet], sub(d, kd), trace,
            row_of[kd], None,
            row_of[kd], None, layout.idx_psi[kd], None,
            with_jacobian,
        )
        fluxes[sp_c.name] = flux

    # anion fluxes on interior faces of the intrinsic layer only
    intr_faces = mesh.face_intr_interior
    ia_k = mesh.intr_index_of_cell[fk[intr_faces]]
    ia_l = mesh.intr_index_of_cell[fl[intr_faces]]
    tau_a = (mesh.face_tau * sp_a.mobility_face)[intr_faces]
    flux_a = np.zeros(len(mesh.faces))

    def suba(idx):
        return {k: da_[k][idx] for k in ("n", "u", "g", "phi_eff")}

    flux_a[intr_faces] = _flux_block(
        trip, res, z_a, tau_a, suba(ia_k), suba(ia_l),
        layout.idx_a[ia_k], layout.idx_a[ia_l],
        layout.idx_a[ia_k], layout.idx_a[ia_l],
        layout.idx_psi[fk[intr_faces]], layout.idx_psi[fl[intr_faces]],
        with_jacobian,
    )
    fluxes["a"] = flux_a

    jac = trip.matrix(layout.n_dof) if with_jacobian else None
    return ResidualSystem(residual=res, jacobian=jac, fluxes=fluxes)


def _norm(residual):
    value = np.max(np.abs(residual))
    return float(value) if np.isfinite(value) else np.inf


def _headroom(eta, deta):
    """Largest s with eta + s deta staying inside [-ETA_LIMIT, ETA_LIMIT]."""
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(deta > 0, (ETA_LIMIT - eta) / deta, np.inf)
        down = np.where(deta < 0, (-ETA_LIMIT - eta) / deta, np.inf)
    return float(min(np.min(up), np.min(down)))


def _limit_step(scenario, layout, x, dx):
    smax = np.inf
    for name, idx in (("n", layout.idx_n), ("p", layout.idx_p), ("a", layout.idx_a)):
        sp_c = scenario.species(name)
        psi_idx = layout.idx_psi[sp_c.cells]
        eta = sp_c.z * (x[idx] + sp_c.shift - x[psi_idx])
        deta = sp_c.z * (dx[idx] - dx[psi_idx])
        smax = min(smax, _headroom(eta, deta))
        biggest = float(np.max(np.abs(deta))) if deta.size else 0.0
        if biggest > ETA_TRUST:
            smax = min(smax, ETA_TRUST / biggest)
    return 1.0 if smax >= 1.0 else max(0.95 * smax, 0.0)


def newton_solve(initial: State, residual_fn, opts: NewtonOptions,
                 scenario: Scenario, layout: Layout) -> State:
    """Damped Newton with backtracking line search on the residual norm.

    `residual_fn(state, with_jacobian)` returns a ResidualSystem.  Steps
    are scaled to keep every state-equation argument inside the safe
    window, then halved until the sup norm strictly decreases.  After
    reaching tolerance, up to two undamped polishing steps push the
    residual toward the rounding floor; this is what keeps the anion
    mass drift at the 1e-10 level over hundreds of steps.
    """
    opts = opts or NewtonOptions()
    state = initial
    x = layout.pack(state)
    rs = residual_fn(state, True)
    norm = _norm(rs.residual)
    if norm <= 0.01 * opts.abs_tol:
        return state
    if not np.isfinite(norm):
        raise NoConvergence(0, norm, "residual not finite at the initial state")
    target = max(opts.abs_tol, opts.rel_tol * norm)
    damping = opts.damping_initial

    def try_step(x, dx, norm, scale, max_backtracks):
        s = scale
        for _ in range(max_backtracks + 1):
            x_try = x + s * dx
            state_try = layout.unpack(x_try, state.time)
            norm_try = _norm(residual_fn(state_try, False).residual)
            if norm_try < norm:
                return x_try, state_try, norm_try, s
            s *= 0.5
        return None

    iters = 0
    while norm > target:
        if iters >= opts.max_iters:
            raise NoConvergence(iters, norm)
        dx = spsolve(rs.jacobian, -rs.residual)
        if not np.all(np.isfinite(dx)):
            raise NoConvergence(iters, norm, "singular Jacobian")
        scale = min(damping, _limit_step(scenario, layout, x, dx))
        if scale <= 0.0:
            raise NoConvergence(iters, norm, "state-equation window exhausted")
        hit = try_step(x, dx, norm, scale, opts.max_backtracks)
        if hit is None:
            raise NoConvergence(iters, norm, "backtracking failed to reduce the residual")
        x, state, norm, used = hit
        damping = min(1.0, max(damping, used) * opts.damping_growth)
        iters += 1
        rs = residual_fn(state, True)
        norm = _norm(rs.residual)

    for _ in range(2):
        if norm <= 0.01 * opts.abs_tol:
            break
        dx = spsolve(rs.jacobian, -rs.residual)
        if not np.all(np.isfinite(dx)):
            break
        hit = try_step(x, dx, norm, _limit_step(scenario, layout, x, dx), 2)
        if hit is None:
            break
        x, state, norm, _ = hit
        rs = residual_fn(state, True)
        norm = _norm(rs.residual)
    return state


def _poisson_parts(scenario, phi_n, phi_p, phi_a, psi, with_energy):
    """Residual, tridiagonal Jacobian bands, scale, and optionally the energy."""
    mesh = scenario.mesh
    par = scenario.params
    m_k = mesh.cell_measure
    sp_n, sp_p = scenario.carriers()
    sp_a = scenario.species("a")
    dn_ = _cell_data(sp_n, phi_n, psi)
    dp_ = _cell_data(sp_p, phi_p, psi)
    da_ = _cell_data(sp_a, phi_a, psi)

    interior = mesh.face_kind == int(FaceKind.INTERIOR)
    dirichlet = mesh.face_kind == int(FaceKind.DIRICHLET)
    cond = par.lam2 * mesh.face_tau * scenario.permittivity_face
    ki, li = mesh.face_cell_k[interior], mesh.face_cell_l[interior]
    kd = mesh.face_cell_k[dirichlet]
    ci, cd = cond[interior], cond[dirichlet]
    psi_trace = np.asarray(scenario.psi_D, dtype=float)

    nc = mesh.n_cells
    res = np.zeros(nc)
    dpsi = psi[li] - psi[ki]
    np.add.at(res, ki, -ci * dpsi)
    np.add.at(res, li, ci * dpsi)
    res[kd] += -cd * (psi_trace - psi[kd])
    charge = par.delta * (sp_n.z * dn_["n"] + sp_p.z * dp_["n"] + scenario.fields.doping_C)
    res += -m_k * charge
    res[sp_a.cells] += -m_k[sp_a.cells] * sp_a.z * da_["n"]

    diag = np.zeros(nc)
    upper = np.zeros(nc - 1)
    np.add.at(diag, ki, ci)
    np.add.at(diag, li, ci)
    upper[ki] = -ci  # interior faces join consecutive cells
    diag[kd] += cd
    diag += par.delta * m_k * (sp_n.z * dn_["dn"] + sp_p.z * dp_["dn"])
    diag[sp_a.cells] += m_k[sp_a.cells] * sp_a.z * da_["dn"]

    # scale: largest per-cell sum of term magnitudes, for the relative stop
    mag = np.zeros(nc)
    np.add.at(mag, ki, ci * np.abs(dpsi))
    np.add.at(mag, li, ci * np.abs(dpsi))
    mag[kd] += cd * np.abs(psi_trace - psi[kd])
    mag += par.delta * m_k * (dn_["n"] + dp_["n"] + np.abs(scenario.fields.doping_C))
    mag[sp_a.cells] += m_k[sp_a.cells] * sp_a.z * da_["n"]
    scale = float(np.max(mag))

    energy = None
    if with_energy:
        energy = 0.5 * float(np.sum(ci * dpsi ** 2) + np.sum(cd * (psi_trace - psi[kd]) ** 2))
        energy += par.delta * float(np.sum(m_k * (
            sp_n.scale * sp_n.stat.g_primitive(dn_["eta"])
            + sp_p.scale * sp_p.stat.g_primitive(dp_["eta"])
        )))
        energy += float(np.sum(m_k[sp_a.cells] * sp_a.scale * sp_a.stat.g_primitive(da_["eta"])))
        energy += -par.delta * float(np.sum(m_k * scenario.fields.doping_C * psi))
    return res, diag, upper, scale, energy


def solve_poisson_given_qfp(scenario: Scenario, phi_n, phi_p, phi_a, psi0=None,
                            tol: float = 1e-12, max_iters: int = 200, history=None) -> np.ndarray:
    """Nonlinear Poisson solve for psi at frozen quasi Fermi potentials.

    The system is the gradient of a strictly convex functional (electric
    energy plus statistics primitives minus the doping work), so damped
    Newton with a line search on that functional converges globally; the
    iteration stops when the residual drops below `tol` times the
    largest per-cell term magnitude.  Appends the functional value per
    accepted iterate to `history` when given.
    """
    mesh = scenario.mesh
    psi = scenario.psi_D_cells.copy() if psi0 is None else np.asarray(psi0, dtype=float).copy()
    species = [scenario.species(s) for s in ("n", "p", "a")]
    phis = (phi_n, phi_p, phi_a)

    res, diag, upper, scale, energy = _poisson_parts(
        scenario, phi_n, phi_p, phi_a, psi, with_energy=True)
    if history is not None:
        history.append(energy)
    for _ in range(max_iters):
        if _norm(res) <= tol * max(scale, 1e-300):
            return psi
        ab = np.zeros((3, mesh.n_cells))
        ab[0, 1:] = upper
        ab[1] = diag
        ab[2, :-1] = upper
        dpsi = solve_banded((1, 1), ab, -res)
        smax = 1.0
        for sp_c, phi in zip(species, phis):
            eta = sp_c.eta(phi, psi[sp_c.cells])
            deta = -sp_c.z * dpsi[sp_c.cells]
            smax = min(smax, _headroom(eta, deta))
        s = 1.0 if smax >= 1.0 else 0.95 * smax
        accepted = False
        for _ in range(60):
            psi_try = psi + s * dpsi
            res2, diag2, upper2, scale2, energy2 = _poisson_parts(
                scenario, phi_n, phi_p, phi_a, psi_try, with_energy=True)
            if energy2 <= energy + 1e-14 * (1.0 + abs(energy)):
                accepted = True
                break
            s *= 0.5
        if not accepted:
            raise NoConvergence(max_iters, _norm(res), "Poisson line search stalled")
        psi, res, diag, upper, scale, energy = psi_try, res2, diag2, upper2, scale2, energy2
        if history is not None:
            history.append(energy)
    raise NoConvergence(max_iters, _norm(res))


def solve_equilibrium(scenario: Scenario, anion_mass_target: float = None) -> State:
    """Thermodynamic equilibrium at constant boundary data.

    All quasi Fermi potentials are spatially constant; the anion level
    is the scalar that meets the prescribed vacancy mass (the mass is
    strictly increasing in it), found by bracketing plus Brent, with a
    nonlinear Poisson solve inside each evaluation.
    """
    target = scenario.anion_mass_target if anion_mass_target is None else float(anion_mass_target)
    if target is None:
        raise ConfigError("equilibrium solve needs an anion mass target")
    phi_l, phi_r = scenario.phi_D
    psi_l, psi_r = scenario.psi_D
    if abs(phi_l - phi_r) > 1e-14 or abs(psi_l - psi_r) > 1e-14:
        raise ConfigError("equilibrium requires constant Dirichlet data")
    if scenario.params.gamma * np.max(np.abs(scenario.fields.generation_G)) > 0:
        raise ConfigError("equilibrium requires zero generation")

    mesh = scenario.mesh
    sp_a = scenario.species("a")
    m_a = mesh.cell_measure[sp_a.cells]
    supremum = float(np.sum(m_a * sp_a.scale * sp_a.stat.x_max))
    if not (0.0 < target < supremum):
        raise MassOutOfRange(
            f"anion mass target {target} outside the attainable range (0, {supremum})"
        )

    phi_c = np.full(mesh.n_cells, phi_l)
    warm = {"psi": None}

    def mass_of(level):
        phi_a = np.full(mesh.n_intr, level)
        psi = solve_poisson_given_qfp(scenario, phi_c, phi_c, phi_a, psi0=warm["psi"])
        warm["psi"] = psi
        n_a = sp_a.density(phi_a, psi[sp_a.cells])
        return float(np.sum(m_a * n_a))

    # start where a flat psi = psi_D would meet the target mean filling
    mean_fill = min(target / float(np.sum(m_a * sp_a.scale)),
                    0.999999 * sp_a.stat.x_max if np.isfinite(sp_a.stat.x_max) else np.inf)
    level = float(psi_l - np.mean(sp_a.shift) + sp_a.stat.inverse(mean_fill) / sp_a.z)
    lo = hi = level
    f_level = mass_of(level) - target
    step = 0.5
    for _ in range(200):
        if f_level <= 0.0:
            break
        lo -= step
        f_level = mass_of(lo) - target
        step *= 2.0
    else:
        raise NoConvergence(200, f_level, "no lower bracket for the anion level")
    step = 0.5
    f_hi = mass_of(hi) - target
    for _ in range(200):
        if f_hi >= 0.0:
            break
        hi += step
        f_hi = mass_of(hi) - target
        step *= 2.0
    else:
        raise NoConvergence(200, f_hi, "no upper bracket for the anion level")

    level = brentq(lambda c: mass_of(c) - target, lo, hi, xtol=1e-14, rtol=4e-15, maxiter=200)
    mass_of(level)  # leave the warm psi at the root
    return State(
        psi=warm["psi"],
        phi_n=phi_c.copy(),
        phi_p=phi_c.copy(),
        phi_a=np.full(mesh.n_intr, level),
        time=0.0,
    )


def _with_mass_constraint(rs, scenario, layout, state, target):
    """Replace the first anion row by the mass constraint.

    The stationary anion rows sum to zero (pure fluxes), so without this
    the stationary system is singular along a constant shift of phi_a.
    """
    sp_a = scenario.species("a")
    m_a = scenario.mesh.cell_measure[sp_a.cells]
    da_ = _cell_data(sp_a, state.phi_a, state.psi)
    row = layout.idx_a[0]
    rs.residual[row] = np.sum(m_a * da_["n"]) - target
    if rs.jacobian is not None:
        jac = rs.jacobian.tolil()
        jac.rows[row] = []
        jac.data[row] = []
        jac[row, layout.idx_a] = m_a * da_["dn"]
        jac[row, layout.idx_psi[sp_a.cells]] = -m_a * da_["dn"]
        rs.jacobian = jac.tocsr()
    return rs


def solve_steady_state(scenario: Scenario, initial_guess: State,
                       opts: NewtonOptions = None, dt0: float = 0.1) -> State:
    """Stationary solution with the initial guess's anion mass.

    Tries the mass-constrained stationary Newton directly; on failure,
    runs pseudo-transient continuation (backward-Euler steps with the
    step size growing tenfold per accepted step) until the stationary
    Newton converges.  The returned state carries time = inf.
    """
    opts = opts or NewtonOptions()
    layout = Layout(scenario.mesh)
    target = diagnostics.anion_mass(initial_guess, scenario)

    def stationary_fn(st, with_jacobian=True):
        rs = assemble_residual(st, st, np.inf, scenario, layout, with_jacobian)
        return _with_mass_constraint(rs, scenario, layout, st, target)

    guess = initial_guess.copy()
    tau = dt0
    for _ in range(40):
        try:
            steady = newton_solve(guess, stationary_fn, opts, scenario, layout)
            steady.time = np.inf
            return steady
        except NoConvergence:
            pass
        old = guess.copy()
        for _ in range(8):
            try:
                guess = newton_solve(
                    old.copy(),
                    lambda st, wj=True: assemble_residual(st, old, tau, scenario, layout, wj),
                    opts, scenario, layout,
                )
                tau *= 10.0
                break
            except NoConvergence:
                tau *= 0.25
        else:
            raise StepFailure("pseudo-transient continuation stalled")
    raise StepFailure("stationary solve did not converge")


def prepare_initial_state(scenario: Scenario, kind: str = "constant",
                          amplitude: float = None, t_start: float = 0.0) -> State:
    """Initial state: named quasi Fermi profiles, psi from the Poisson solve."""
    from .scenario import initial_quasi_fermi

    phi_n0, phi_p0, phi_a0 = initial_quasi_fermi(scenario, kind, amplitude)
    psi0 = solve_poisson_given_qfp(scenario, phi_n0, phi_p0, phi_a0)
    return State(psi=psi0, phi_n=phi_n0, phi_p=phi_p0, phi_a=phi_a0, time=float(t_start))


@dataclass
class TransientResult:
    records: list
    final_state: State
    states: list = None


def run_transient(scenario: Scenario, grid: TimeGrid, initial: State,
                  steady: State = None, opts: NewtonOptions = None,
                  sink=None, keep_states: bool = False) -> TransientResult:
    """Backward-Euler time stepping with step bisection on failure.

    A diagnostics record is emitted for the initial state and after
    every accepted step, including bisection sub-steps; `sink(record)`
    streams them out as they appear.  When a steady state is supplied
    the records also carry the distance-to-steady measures.
    """
    opts = opts or NewtonOptions()
    layout = Layout(scenario.mesh)
    records = []
    states = [] if keep_states else None

    def emit(st):
        record = diagnostics.make_record(scenario, st, steady=steady)
        records.append(record)
        if keep_states:
            states.append(st.copy())
        if sink is not None:
            sink(record)

    state = initial.copy()
    state.time = float(grid.t_start)
    emit(state)

    def advance(old, tau, depth):
        guess = old.copy()
        guess.time = old.time + tau
        try:
            new = newton_solve(
                guess,
                lambda st, wj=True: assemble_residual(st, old, tau, scenario, layout, wj),
                opts, scenario, layout,
            )
        except NoConvergence as err:
            if depth >= 10:
                raise StepFailure(
                    f"step to t = {old.time + tau:g} failed after 10 bisections: {err}"
                ) from err
            mid = advance(old, 0.5 * tau, depth + 1)
            return advance(mid, 0.5 * tau, depth + 1)
        new.time = old.time + tau
        emit(new)
        return new

    for tau in grid.steps():
        state = advance(state, float(tau), 0)
    return TransientResult(records=records, final_state=state, states=states)
