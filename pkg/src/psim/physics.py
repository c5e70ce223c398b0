"""Model data: dimensionless groups, doping, generation, recombination.

Charge numbers are fixed at z_n = -1 and z_p = +1; the mobile ionic
species carries z_a > 0.  The dimensionless groups lam (rescaled Debye
length), nu (anion/carrier mobility ratio), delta (carrier/anion
density ratio) and gamma (rescaled photogeneration) either come
straight from a dimensionless scenario or from `nondimensionalize`
applied to laboratory-unit device data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

__all__ = [
    "Z_N",
    "Z_P",
    "ELEMENTARY_CHARGE",
    "BOLTZMANN_CONSTANT",
    "DimensionlessParams",
    "PhysicalParams",
    "RecombinationParams",
    "FieldData",
    "thermal_voltage",
    "nondimensionalize",
    "generation_profile",
    "recombination_rate",
    "recombination_partials",
    "as_region_values",
]

Z_N = -1
Z_P = +1

# exact SI values, charge converted to coulomb-per-cm-compatible usage
ELEMENTARY_CHARGE = 1.602176634e-19  # C
BOLTZMANN_CONSTANT = 1.380649e-23  # J/K


def thermal_voltage(temperature):
    """k_B T / q in volts."""
    return BOLTZMANN_CONSTANT * temperature / ELEMENTARY_CHARGE


def as_region_values(value):
    """Broadcast a scalar or length-3 sequence to per-region values (HTL, intrinsic, ETL)."""
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.shape == (1,):
        return np.repeat(arr, 3)
    if arr.shape != (3,):
        raise DomainError(f"region-wise value needs a scalar or 3 entries, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class DimensionlessParams:
    lam: float  # rescaled Debye length
    nu: float  # anion/carrier mobility ratio
    delta: float  # carrier/anion density ratio
    gamma: float  # rescaled photogeneration
    z_a: int = 1

    def __post_init__(self):
        if not (self.lam > 0 and self.nu > 0 and self.delta > 0):
            raise DomainError("lam, nu, delta must be positive")
        if self.gamma < 0:
            raise DomainError("gamma must be nonnegative")
        if not (isinstance(self.z_a, (int, np.integer)) and self.z_a > 0):
            raise DomainError("z_a must be a positive integer")

    @property
    def lam2(self):
        return self.lam * self.lam


@dataclass(frozen=True)
class PhysicalParams:
    """Laboratory-unit device data (cm / K / V / s unit system).

    Region-wise entries (permittivity, band edges, reference densities)
    accept a scalar or a (HTL, intrinsic, ETL) triple.
    """

    l: float  # device thickness, cm
    T: float  # temperature, K
    eps_s: object  # permittivity, F/cm
    N_tilde: float  # carrier density scale, 1/cm^3
    N_a_tilde: float  # anion density scale, 1/cm^3
    mu_tilde: float  # carrier mobility scale, cm^2/(V s)
    mu_a_tilde: float  # anion mobility, cm^2/(V s)
    F_ph: float  # photon flux, 1/(cm^2 s)
    alpha_g: float  # absorption coefficient, 1/cm
    E_n: object = 0.0  # conduction band edge, eV
    E_p: object = 0.0  # valence band edge, eV
    E_a: object = 0.0  # anion formation level, eV
    N_n: object = None  # effective density of states, 1/cm^3
    N_p: object = None
    N_a: object = None

    def __post_init__(self):
        positive = dict(
            l=self.l,
            T=self.T,
            N_tilde=self.N_tilde,
            N_a_tilde=self.N_a_tilde,
            mu_tilde=self.mu_tilde,
            mu_a_tilde=self.mu_a_tilde,
        )
        for name, value in positive.items():
            if not value > 0:
                raise DomainError(f"{name} must be positive, got {value}")
        if self.F_ph < 0 or self.alpha_g < 0:
            raise DomainError("F_ph and alpha_g must be nonnegative")
        if np.any(as_region_values(self.eps_s) <= 0):
            raise DomainError("eps_s must be positive")
        for name in ("N_n", "N_p", "N_a"):
            value = getattr(self, name)
            if value is not None and np.any(as_region_values(value) <= 0):
                raise DomainError(f"{name} must be positive")

    @property
    def thermal_voltage(self):
        return thermal_voltage(self.T)

    @property
    def eps_ref(self):
        # absorber layer value anchors the scaling; hatted profiles are ratios to it
        return float(as_region_values(self.eps_s)[1])


@dataclass(frozen=True)
class RecombinationParams:
    enabled: bool = False
    r0: float = 0.0  # radiative coefficient
    tau_n: float = 0.0  # trap-assisted lifetimes
    tau_p: float = 0.0
    n_n_tau: float = 0.0  # trap reference densities
    n_p_tau: float = 0.0
    srh_standard_lifetimes: bool = False  # use tau_n on the hole term

    def __post_init__(self):
        for name in ("r0", "tau_n", "tau_p", "n_n_tau", "n_p_tau"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class FieldData:
    """Per-cell dimensionless source data."""

    doping_C: np.ndarray
    generation_G: np.ndarray
    recombination: RecombinationParams = field(default_factory=RecombinationParams)

    def __post_init__(self):
        object.__setattr__(self, "doping_C", np.asarray(self.doping_C, dtype=float))
        object.__setattr__(self, "generation_G", np.asarray(self.generation_G, dtype=float))
        if np.any(self.generation_G < 0):
            raise DomainError("generation must be nonnegative")


def nondimensionalize(p: PhysicalParams, z_a: int = 1) -> DimensionlessParams:
    """Form lam, nu, delta, gamma from laboratory-unit device data."""
    u_t = p.thermal_voltage
    lam = np.sqrt(p.eps_ref * u_t / (p.l**2 * ELEMENTARY_CHARGE * p.N_a_tilde))
    nu = p.mu_a_tilde / p.mu_tilde
    delta = p.N_tilde / p.N_a_tilde
    gamma = p.F_ph * p.alpha_g * p.l**2 / (p.mu_tilde * u_t * p.N_tilde)
    return DimensionlessParams(lam=float(lam), nu=nu, delta=delta, gamma=gamma, z_a=z_a)


def generation_profile(F_ph, alpha_g, depth_coord):
    """Beer-Lambert profile F_ph * alpha_g * exp(-alpha_g * depth)."""
    if alpha_g < 0:
        raise DomainError("alpha_g must be nonnegative")
    return F_ph * alpha_g * np.exp(-alpha_g * np.asarray(depth_coord, dtype=float))


def _rate_coefficient(params, n_n, n_p):
    r = np.full_like(np.asarray(n_n, dtype=float), params.r0)
    tau_second = params.tau_n if params.srh_standard_lifetimes else params.tau_p
    den = params.tau_p * (n_n + params.n_n_tau) + tau_second * (n_p + params.n_p_tau)
    active = den >= 1e-300  # SRH switched off entirely -> no trap term
    r = np.where(active, r + 1.0 / np.where(active, den, 1.0), r)
    return r, den, active, tau_second


def recombination_rate(params: RecombinationParams, n_n, n_p, phi_n, phi_p):
    """R = r(n_n, n_p) n_n n_p (1 - exp(phi_n - phi_p)); 0 when disabled.

    sign(R) = sign(phi_p - phi_n), which makes the R (phi_p - phi_n)
    dissipation term nonnegative.
    """
    n_n, n_p = np.asarray(n_n, dtype=float), np.asarray(n_p, dtype=float)
    if not params.enabled:
        return np.zeros(np.broadcast(n_n, n_p, phi_n, phi_p).shape)
    r, _, _, _ = _rate_coefficient(params, n_n, n_p)
    with np.errstate(over="ignore"):
        return r * n_n * n_p * (-np.expm1(np.asarray(phi_n) - np.asarray(phi_p)))


def recombination_partials(params: RecombinationParams, n_n, n_p, phi_n, phi_p):
    """R plus its partial derivatives (n and phi held independent).

    Returns (R, dR/dn_n, dR/dn_p, dR/dphi_n, dR/dphi_p); the caller
    chains in dn/dphi and dn/dpsi from the state equation.
    """
    n_n, n_p = np.asarray(n_n, dtype=float), np.asarray(n_p, dtype=float)
    d = np.asarray(phi_n, dtype=float) - np.asarray(phi_p, dtype=float)
    if not params.enabled:
        zero = np.zeros(np.broadcast(n_n, n_p, d).shape)
        return zero, zero, zero, zero, zero
    r, den, active, tau_second = _rate_coefficient(params, n_n, n_p)
    inv_den2 = np.where(active, 1.0 / np.where(active, den, 1.0) ** 2, 0.0)
    dr_dnn = -params.tau_p * inv_den2
    dr_dnp = -tau_second * inv_den2
    with np.errstate(over="ignore"):
        s = -np.expm1(d)
        ds = -np.exp(d)
    rate = r * n_n * n_p * s
    return (
        rate,
        (dr_dnn * n_n + r) * n_p * s,
        (dr_dnp * n_p + r) * n_n * s,
        r * n_n * n_p * ds,
        -r * n_n * n_p * ds,
    )
