"""Process-unit models of the calcination loop.

Each unit exposes either a static outlet map (fan, filter, hot gas
generator) or residual contributions to the plant DAE (calciner, cyclones).
Residual functions are pure; they never mutate their inputs, so the plant
assembly can evaluate them in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import chem
from .chem import SpeciesId
from .errors import DomainError, OvertemperatureError, ValidationError

# Pressure half-width of the smoothed connector law around zero drop.
CONNECTOR_SMOOTHING_PA = 0.1

T_AMBIENT = 298.15  # K
P_AMBIENT = 1.0e5  # Pa


def _species(species):
    return chem.SpeciesSet.default() if species is None else species


# ---------------------------------------------------------------------------
# streams


@dataclass
class Stream:
    """Molar flow bundle at a single temperature and pressure.

    n_dot is mol/s per species in canonical order.
    """

    n_dot: np.ndarray
    T: float
    P: float

    def __post_init__(self):
        self.n_dot = np.asarray(self.n_dot, dtype=float)

    def enthalpy_flow(self, species=None) -> float:
        """W."""
        return float(_species(species).enthalpy(self.T, self.P, self.n_dot))

    def mass_flow(self, species=None) -> float:
        """kg/s."""
        return float(_species(species).mass(self.n_dot))

    def volumetric_flow(self, species=None) -> float:
        """m3/s at stream conditions."""
        return float(_species(species).volume(self.T, self.P, self.n_dot))

    def gas_mass_flow(self, species=None) -> float:
        sp = _species(species)
        return float(sp.mass(self.n_dot * sp.gas_mask))

    def solid_mass_flow(self, species=None) -> float:
        sp = _species(species)
        return float(sp.mass(self.n_dot * sp.solid_mask))

    def replace(self, **kw) -> "Stream":
        out = Stream(self.n_dot.copy(), self.T, self.P)
        for k, v in kw.items():
            setattr(out, k, v)
        return out


# ---------------------------------------------------------------------------
# geometries and per-unit parameter bundles


@dataclass(frozen=True)
class CalcinerGeometry:
    """Tube geometry and closure constants of the plug-flow calciner."""

    length: float  # m
    diameter: float  # m
    n_cells: int
    friction_factor: float
    h_sg: float  # W/(m3 K), solid-gas film coefficient
    ua_amb: float  # W/(m K), loss to ambient per unit length
    t_amb: float = T_AMBIENT

    def __post_init__(self):
        if self.length <= 0 or self.diameter <= 0:
            raise ValidationError("calciner length and diameter must be > 0")
        if self.n_cells < 3:
            raise ValidationError("calciner needs at least 3 cells")
        if self.friction_factor <= 0 or self.h_sg <= 0 or self.ua_amb < 0:
            raise ValidationError("friction_factor and h_sg must be > 0, ua_amb >= 0")

    @property
    def area(self) -> float:
        return math.pi * self.diameter**2 / 4.0

    @property
    def dz(self) -> float:
        return self.length / self.n_cells

    @property
    def cell_volume(self) -> float:
        return self.area * self.dz


@dataclass(frozen=True)
class SeparationParams:
    """Exponential grade-efficiency surrogate constants."""

    kappa: float  # (s/m)^exponent
    exponent: float = 1.0
    limit_loading: float = math.inf  # kg solids / kg gas

    def __post_init__(self):
        if self.kappa < 0 or self.exponent <= 0 or self.limit_loading <= 0:
            raise ValidationError("separation parameters out of range")


@dataclass(frozen=True)
class CycloneParams:
    volume: float  # m3
    inlet_area: float  # m2
    tau_solids: float  # s, solids residence time of the holdup
    separation: SeparationParams
    ua_amb: float = 0.0  # W/K, lumped loss
    t_amb: float = T_AMBIENT

    def __post_init__(self):
        if self.volume <= 0 or self.inlet_area <= 0 or self.tau_solids <= 0:
            raise ValidationError("cyclone volume, inlet area, tau must be > 0")
        if self.ua_amb < 0:
            raise ValidationError("ua_amb must be >= 0")


@dataclass
class CalcinerCellState:
    c: np.ndarray  # mol/m3
    u_hat_s: float  # J/m3
    u_hat_g: float  # J/m3
    T_s: float  # K
    T_g: float  # K
    P: float  # Pa


@dataclass
class CycloneState:
    holdup: np.ndarray  # mol
    u_hat: float  # J
    T: float  # K
    P: float  # Pa
    params: CycloneParams = None


@dataclass
class CalcinerContext:
    """Quantities the tube model needs from the rest of the plant."""

    v: float  # m/s superficial velocity (one value along the tube)
    t_amb: float = T_AMBIENT


@dataclass(frozen=True)
class Connector:
    """Lumped flow resistance between two pressure nodes."""

    name: str
    upstream: str
    downstream: str
    C: float  # kg/s per sqrt(Pa^2/K)

    def __post_init__(self):
        if self.C <= 0.0:
            raise ValidationError(f"connector {self.name}: C must be > 0")


# ---------------------------------------------------------------------------
# static units


def superficial_velocity(delta_p: float, geometry: CalcinerGeometry, rho: float) -> float:
    """Darcy-Weisbach velocity for a pressure drop over the whole tube."""
    if rho <= 0.0:
        raise DomainError("density must be > 0")
    if delta_p < 0.0:
        raise DomainError("backflow through the calciner is not modeled (delta_p < 0)")
    return math.sqrt(2.0 * delta_p * geometry.diameter
                     / (geometry.friction_factor * geometry.length * rho))


def separation_efficiency(inlet_velocity: float, solids_loading: float,
                          params: SeparationParams) -> float:
    """Fraction of incoming solids sent to the dip leg, in [0, 1]."""
    if inlet_velocity < 0.0 or solids_loading < 0.0:
        raise DomainError("velocity and loading must be >= 0")
    if inlet_velocity == 0.0:
        return 0.0
    eta = 1.0 - math.exp(-params.kappa * inlet_velocity**params.exponent)
    eta = min(max(eta, 0.0), 1.0)
    if solids_loading > params.limit_loading:
        # Overload regime: the surplus is skimmed off at the inlet, only the
        # limit loading passes through the inner vortex.
        eta = 1.0 - (params.limit_loading / solids_loading) * (1.0 - eta)
    return min(max(eta, 0.0), 1.0)


def connector_flow(p1: float, p2: float, t1: float, c: float) -> float:
    """Mass flow through a lumped-resistance connecting tube, kg/s.

    F = C*sqrt((P1-P2)(P1+P2)/T1), extended to an odd function of the drop
    and blended with a cubic inside |P1-P2| < 0.1 Pa so the plant Jacobian
    stays bounded at zero flow (the raw law has infinite slope there).
    """
    if t1 <= 0.0:
        raise DomainError("upstream temperature must be > 0")
    if c < 0.0:
        raise ValidationError("connector resistance C must be >= 0")
    s = p1 - p2
    q = (p1 + p2) / t1
    if q < 0.0:
        raise DomainError("pressures must be non-negative")
    eps = CONNECTOR_SMOOTHING_PA
    if abs(s) >= eps:
        return math.copysign(c * math.sqrt(abs(s) * q), s)
    # Odd cubic with value and slope matched to sqrt at |s| = eps.
    blend = 1.25 * eps**-0.5 * s - 0.25 * eps**-2.5 * s**3
    return c * math.sqrt(q) * blend


def ehgg_outlet(inflow: Stream, p_el: float, eta_e: float, species=None) -> Stream:
    """Electric heater outlet: enthalpy flow raised by eta_e * P_el."""
    sp = _species(species)
    if p_el < 0.0:
        raise DomainError("electrical power must be >= 0")
    if not 0.0 < eta_e <= 1.0:
        raise ValidationError("eta_e must be in (0, 1]")
    if float((inflow.n_dot * sp.gas_mask).sum()) <= 0.0:
        raise DomainError("heater needs a gas flow")
    if p_el == 0.0:
        return inflow.replace()
    h_target = inflow.enthalpy_flow(sp) + eta_e * p_el
    h_max = float(sp.enthalpy(chem.T_MAX, inflow.P, inflow.n_dot))
    if h_target > h_max:
        raise OvertemperatureError(
            f"heater outlet above {chem.T_MAX:.0f} K for P_el = {p_el:.3g} W")
    t_out = sp.temperature_from_enthalpy(h_target, inflow.P, inflow.n_dot,
                                         t_guess=min(inflow.T, chem.T_MAX))
    return Stream(inflow.n_dot.copy(), float(t_out), inflow.P)


def fan_outlet(inflow: Stream, delta_p_rise: float, eta_fan: float,
               species=None) -> tuple[Stream, float]:
    """Pressure boost and the electrical power it draws.

    The stream itself is treated as isenthalpic; the shaft work shows up
    only in the electricity account.
    """
    if delta_p_rise < 0.0:
        raise DomainError("fan pressure rise must be >= 0")
    if not 0.0 < eta_fan <= 1.0:
        raise ValidationError("eta_fan must be in (0, 1]")
    q = inflow.volumetric_flow(species)
    power = q * delta_p_rise / eta_fan
    return Stream(inflow.n_dot.copy(), inflow.T, inflow.P + delta_p_rise), power


def filter_outlet(inflow: Stream, dust_removal: float, k_dp: float,
                  species=None) -> Stream:
    """Bag filter: strips residual solids, costs a quadratic pressure drop."""
    sp = _species(species)
    if not 0.0 <= dust_removal <= 1.0:
        raise ValidationError("dust_removal must be in [0, 1]")
    if k_dp < 0.0:
        raise ValidationError("k_dp must be >= 0")
    q = inflow.volumetric_flow(sp)
    n_out = inflow.n_dot * np.where(sp.solid_mask, 1.0 - dust_removal, 1.0)
    return Stream(n_out, inflow.T, inflow.P - k_dp * q * q)


# ---------------------------------------------------------------------------
# calciner


def calciner_rhs(c, u_s, u_g, t_s, t_g, p, geometry: CalcinerGeometry, v: float,
                 inflow_n_flux, inflow_h_s_flux, inflow_h_g_flux,
                 species=None, t_amb=None):
    """Finite-volume time derivatives of all calciner cells.

    Array core shared by the public residual op and the plant assembly.
    c is (n_cells, 5) mol/m3, u_s/u_g are J/m3, inflow fluxes are per unit
    cross-section (mol/(m2 s) and W/m2, solid and gas enthalpy separately).
    Returns the derivatives plus the outlet face fluxes.
    """
    sp = _species(species)
    geom = geometry
    t_amb = geom.t_amb if t_amb is None else t_amb
    c = np.asarray(c, dtype=float)
    dz = geom.dz

    if v < 0.0:
        raise DomainError("backflow through the calciner is not modeled")

    # First-order upwind: face k sits between cell k-1 and cell k.
    n_flux = np.vstack((np.asarray(inflow_n_flux, dtype=float)[None, :], v * c))

    h_sp_s = sp.enthalpy_species(t_s, check=False)  # (n_cells, 5)
    h_sp_g = sp.enthalpy_species(t_g, check=False)
    h_dens_s = ((c * sp.solid_mask) * h_sp_s).sum(axis=-1)  # J/m3
    h_dens_g = ((c * sp.gas_mask) * h_sp_g).sum(axis=-1)
    h_flux_s = np.concatenate(([float(inflow_h_s_flux)], v * h_dens_s))
    h_flux_g = np.concatenate(([float(inflow_h_g_flux)], v * h_dens_g))

    rates = sp.reaction_rate(t_s, c, check=False)  # (n_cells, 5)
    dc_dt = (n_flux[:-1] - n_flux[1:]) / dz + rates

    j_sg = geom.h_sg * (t_g - t_s)  # W/m3, positive heats the solid
    v_solid = c @ sp.molar_volume_solid
    q_amb_per_vol = geom.ua_amb / geom.area  # W/(m3 K)
    q_amb_s = q_amb_per_vol * v_solid * (t_amb - t_s)
    q_amb_g = q_amb_per_vol * (1.0 - v_solid) * (t_amb - t_g)

    # Vapor released by the reaction leaves the solid phase carrying its
    # enthalpy at the solid temperature; the reaction heat itself emerges
    # from the formation enthalpies inside the energy closures.
    vapor_h = rates[:, SpeciesId.WATER_VAPOR] * h_sp_s[:, SpeciesId.WATER_VAPOR]

    du_s_dt = (h_flux_s[:-1] - h_flux_s[1:]) / dz + j_sg + q_amb_s - vapor_h
    du_g_dt = (h_flux_g[:-1] - h_flux_g[1:]) / dz - j_sg + q_amb_g + vapor_h

    outlet = {
        "n_flux": n_flux[-1],
        "h_s_flux": float(h_flux_s[-1]),
        "h_g_flux": float(h_flux_g[-1]),
    }
    return dc_dt, du_s_dt, du_g_dt, outlet


def calciner_algebraic(c, u_s, u_g, t_s, t_g, p, species=None):
    """Per-cell closures: volume split sums to one, energies match states."""
    sp = _species(species)
    c = np.asarray(c, dtype=float)
    c_solid = c * sp.solid_mask
    c_gas = c * sp.gas_mask
    v_solid = c @ sp.molar_volume_solid
    v_gas = c_gas[:, sp.gas_mask].sum(axis=-1) * chem.R_GAS * t_g / p
    res_vol = v_solid + v_gas - 1.0
    res_us = sp.internal_energy(t_s, p, c_solid, check=False) - u_s
    res_ug = sp.internal_energy(t_g, p, c_gas, check=False) - u_g
    return res_vol, res_us, res_ug


def calciner_residuals(cells, inflow: Stream, geometry: CalcinerGeometry,
                       context: CalcinerContext, species=None):
    """Time derivatives and algebraic residuals for a list of cell states.

    Returns ((dc_dt, du_s_dt, du_g_dt), (res_volume, res_u_s, res_u_g)).
    """
    sp = _species(species)
    c = np.array([cell.c for cell in cells], dtype=float)
    if np.any(np.asarray(inflow.n_dot) < 0.0):
        raise DomainError("inflow composition must be >= 0")
    u_s = np.array([cell.u_hat_s for cell in cells])
    u_g = np.array([cell.u_hat_g for cell in cells])
    t_s = np.array([cell.T_s for cell in cells])
    t_g = np.array([cell.T_g for cell in cells])
    p = np.array([cell.P for cell in cells])

    area = geometry.area
    n_in = inflow.n_dot / area
    h_in_s = sp.enthalpy(inflow.T, inflow.P, inflow.n_dot * sp.solid_mask) / area
    h_in_g = sp.enthalpy(inflow.T, inflow.P, inflow.n_dot * sp.gas_mask) / area

    dc_dt, du_s_dt, du_g_dt, _ = calciner_rhs(
        c, u_s, u_g, t_s, t_g, p, geometry, context.v, n_in, h_in_s, h_in_g,
        species=sp, t_amb=context.t_amb)
    alg = calciner_algebraic(c, u_s, u_g, t_s, t_g, p, species=sp)
    return (dc_dt, du_s_dt, du_g_dt), alg


def calcination_degree(c, species=None) -> np.ndarray:
    """1 minus the kaolinite share of the clay inventory, per cell."""
    sp = _species(species)
    c = np.asarray(c, dtype=float)
    kao = c[..., SpeciesId.KAOLINITE]
    clay = kao + c[..., SpeciesId.METAKAOLIN]
    with np.errstate(invalid="ignore", divide="ignore"):
        deg = np.where(clay > 0.0, 1.0 - kao / np.maximum(clay, 1e-300), 1.0)
    return deg


# ---------------------------------------------------------------------------
# cyclone


def cyclone_rhs(state: CycloneState, inflow_n_dot, inflow_h_dot,
                inlet_velocity, solids_loading, gas_out_mass_flows,
                species=None):
    """Balance core for one cyclone with an arbitrary set of gas offtakes.

    inlet_velocity and solids_loading describe the incoming stream at its
    own upstream conditions.  gas_out_mass_flows: sequence of kg/s, one per
    outgoing gas connector (negative entries are clipped to zero; backflow
    injects nothing here and is accounted by the caller).  Returns
    (dn_dt, du_dt, solid_out_n_dot, [gas_out_n_dot per offtake], eta).
    """
    sp = _species(species)
    p = state.params
    n = np.asarray(state.holdup, dtype=float)

    gas_holdup = n * sp.gas_mask
    gas_mass = float(sp.mass(gas_holdup))
    flows = np.maximum(np.asarray(gas_out_mass_flows, dtype=float), 0.0)
    # Molar offtake proportional to gas holdup so each kg/s maps to a
    # composition-consistent mol/s.
    per_kg = gas_holdup / max(gas_mass, 1e-13)
    gas_out = [f * per_kg for f in flows]

    # Solids leave the well-mixed holdup on a residence-time clock and are
    # split by the separation efficiency of the incoming stream.
    eta = separation_efficiency(inlet_velocity, solids_loading, p.separation)

    drain = (n * sp.solid_mask) / p.tau_solids
    solid_out = eta * drain
    entrained = (1.0 - eta) * drain
    total_flow = float(flows.sum())
    shares = flows / max(total_flow, 1e-13)
    for k in range(len(gas_out)):
        gas_out[k] = gas_out[k] + shares[k] * entrained

    rates = sp.reaction_rate(state.T, n / p.volume, check=False) * p.volume
    out_total = solid_out + (np.sum(gas_out, axis=0) if gas_out else 0.0)
    dn_dt = np.asarray(inflow_n_dot, dtype=float) - out_total + rates
    h_out = sp.enthalpy(state.T, state.P, out_total)
    du_dt = float(inflow_h_dot) - float(h_out) + p.ua_amb * (p.t_amb - state.T)
    return dn_dt, du_dt, solid_out, gas_out, eta


def cyclone_algebraic(state: CycloneState, species=None):
    """Vessel volume closure and energy-state consistency."""
    sp = _species(species)
    p = state.params
    res_vol = sp.volume(state.T, state.P, state.holdup, check=False) - p.volume
    res_u = sp.internal_energy(state.T, state.P, state.holdup, check=False) - state.u_hat
    return res_vol, res_u


def cyclone_residuals(state: CycloneState, gas_solid_inflow: Stream,
                      gas_out_mass_flow=None, species=None):
    """Single-offtake form: gas leaves at the incoming gas mass rate unless
    a connector-driven rate is supplied.

    Returns ((dn_dt, du_dt), (res_volume, res_u), solid_outflow, gas_outflow).
    """
    sp = _species(species)
    if np.any(np.asarray(gas_solid_inflow.n_dot) < 0.0):
        raise DomainError("inflow composition must be >= 0")
    if gas_out_mass_flow is None:
        gas_out_mass_flow = gas_solid_inflow.gas_mass_flow(sp)
    v_in = gas_solid_inflow.volumetric_flow(sp) / state.params.inlet_area
    loading = (gas_solid_inflow.solid_mass_flow(sp)
               / max(gas_solid_inflow.gas_mass_flow(sp), 1e-13))
    dn_dt, du_dt, solid_out, gas_out, _ = cyclone_rhs(
        state, gas_solid_inflow.n_dot, gas_solid_inflow.enthalpy_flow(sp),
        v_in, loading, [gas_out_mass_flow], species=sp)
    alg = cyclone_algebraic(state, species=sp)
    solid_stream = Stream(solid_out, state.T, state.P)
    gas_stream = Stream(gas_out[0], state.T, state.P)
    return (dn_dt, du_dt), alg, solid_stream, gas_stream
