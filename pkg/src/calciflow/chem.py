"""Species registry, dehydroxylation kinetics, and thermodynamic properties.

The model works on a closed set of five species in a fixed canonical order
(kaolinite, metakaolin, water vapor, nitrogen, oxygen).  Solids are
incompressible with constant molar volume, gases are ideal, and enthalpy is
built from constant formation enthalpies plus polynomial heat capacities
integrated from the reference state (298.15 K, 1e5 Pa).  Internal energy is
defined as U = H - P*V exactly, so the identity holds to rounding.

Amounts are either extensive (mol) or volumetric (mol/m3); every property
here is degree-1 homogeneous in the amount vector, so both bases work with
the same functions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from importlib import resources

import numpy as np

from .errors import ConvergenceError, DomainError, ValidationError

R_GAS = 8.31446261815324  # J/(mol K)
T_REF = 298.15  # K
P_REF = 1.0e5  # Pa
T_MIN = 250.0  # K, validity range of the property polynomials
T_MAX = 2000.0


class SpeciesId(IntEnum):
    """Canonical species ordering used by every state vector in the package."""

    KAOLINITE = 0
    METAKAOLIN = 1
    WATER_VAPOR = 2
    NITROGEN = 3
    OXYGEN = 4


N_SPECIES = len(SpeciesId)

_ID_NAMES = {
    SpeciesId.KAOLINITE: "kaolinite",
    SpeciesId.METAKAOLIN: "metakaolin",
    SpeciesId.WATER_VAPOR: "water_vapor",
    SpeciesId.NITROGEN: "nitrogen",
    SpeciesId.OXYGEN: "oxygen",
}
_NAME_IDS = {v: k for k, v in _ID_NAMES.items()}

# Kaolinite -> metakaolin + 2 H2O(g), mol of change per mol of reaction extent.
STOICHIOMETRY = np.array([-1.0, 1.0, 2.0, 0.0, 0.0])


@dataclass(frozen=True)
class Species:
    """One species record as loaded from the parameter file."""

    species_id: SpeciesId
    formula: str
    phase: str  # "solid" | "gas"
    molar_mass: float  # kg/mol
    formation_enthalpy: float  # J/mol at (T_REF, P_REF)
    cp_coeffs: tuple  # J/(mol K), degree <= 4 polynomial in T
    molar_volume: float  # m3/mol, solids only (0.0 for gases)
    elements: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phase not in ("solid", "gas"):
            raise ValidationError(f"species {self.formula}: phase must be solid or gas")
        if self.molar_mass <= 0.0:
            raise ValidationError(f"species {self.formula}: molar mass must be > 0")
        if len(self.cp_coeffs) > 5:
            raise ValidationError(f"species {self.formula}: cp polynomial degree must be <= 4")
        if self.phase == "solid" and self.molar_volume <= 0.0:
            raise ValidationError(f"species {self.formula}: solid molar volume must be > 0")


@dataclass(frozen=True)
class KineticsParams:
    """Arrhenius parameters of the third-order dehydroxylation rate law."""

    pre_exponential: float  # (mol/m3)^-2 s^-1
    activation_energy: float  # J/mol
    order: int = 3

    def __post_init__(self):
        if self.pre_exponential <= 0.0:
            raise ValidationError("kinetics: pre-exponential factor must be > 0")
        if self.activation_energy <= 0.0:
            raise ValidationError("kinetics: activation energy must be > 0")
        if self.order != 3:
            raise ValidationError("kinetics: only the third-order rate law is supported")


@dataclass
class Composition:
    """Amount vector over the canonical species order.

    `moles` may be extensive (mol) or volumetric (mol/m3) depending on
    context; entries must be non-negative.
    """

    moles: np.ndarray

    def __post_init__(self):
        self.moles = np.asarray(self.moles, dtype=float)
        if self.moles.shape != (N_SPECIES,):
            raise ValidationError(f"composition must have {N_SPECIES} entries")
        if not np.all(np.isfinite(self.moles)):
            raise ValidationError("composition entries must be finite")
        if np.any(self.moles < 0.0):
            raise DomainError("composition entries must be non-negative")

    @classmethod
    def from_dict(cls, amounts: dict) -> "Composition":
        moles = np.zeros(N_SPECIES)
        for name, value in amounts.items():
            key = name.lower()
            if key not in _NAME_IDS:
                raise ValidationError(f"unknown species id {name!r}")
            moles[_NAME_IDS[key]] = value
        return cls(moles)

    def to_dict(self) -> dict:
        return {_ID_NAMES[SpeciesId(i)]: float(self.moles[i]) for i in range(N_SPECIES)}


class SpeciesSet:
    """The closed five-species registry plus vectorized property tables.

    All property evaluators broadcast: T and P may be scalars or arrays and
    the amount vector `n` may have shape (..., 5).
    """

    def __init__(self, species: list[Species], kinetics: KineticsParams):
        by_id = {sp.species_id: sp for sp in species}
        if set(by_id) != set(SpeciesId) or len(species) != N_SPECIES:
            raise ValidationError("species set must contain exactly the five canonical species")
        self.species = [by_id[SpeciesId(i)] for i in range(N_SPECIES)]
        self.kinetics = kinetics

        self.molar_mass = np.array([sp.molar_mass for sp in self.species])
        self.formation_enthalpy = np.array([sp.formation_enthalpy for sp in self.species])
        self.gas_mask = np.array([sp.phase == "gas" for sp in self.species])
        self.solid_mask = ~self.gas_mask
        self.molar_volume_solid = np.array(
            [sp.molar_volume if sp.phase == "solid" else 0.0 for sp in self.species]
        )
        cp = np.zeros((N_SPECIES, 5))
        for i, sp in enumerate(self.species):
            coeffs = np.asarray(sp.cp_coeffs, dtype=float)
            cp[i, : coeffs.size] = coeffs
        self._cp_coeffs = cp
        # Antiderivative coefficients of cp for the sensible-enthalpy integral.
        self._h_coeffs = cp / np.arange(1.0, 6.0)
        self._h_ref = self._poly_eval(self._h_coeffs, np.asarray(T_REF))

        elements = sorted({el for sp in self.species for el in sp.elements})
        self.element_names = elements
        emat = np.zeros((len(elements), N_SPECIES))
        for j, sp in enumerate(self.species):
            for el, count in sp.elements.items():
                emat[elements.index(el), j] = count
        self.element_matrix = emat

        self._validate_cp_positive()
        if not np.allclose(self.element_matrix @ STOICHIOMETRY, 0.0, atol=0.0):
            raise ValidationError("reaction stoichiometry does not conserve elements")

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict) -> "SpeciesSet":
        try:
            atomic = data["atomic_mass_kg_per_mol"]
            records = data["species"]
            kin = data["kinetics"]
        except KeyError as exc:
            raise ValidationError(f"species file missing section {exc}") from exc
        species = []
        for rec in records:
            key = rec.get("id", "").lower()
            if key not in _NAME_IDS:
                raise ValidationError(f"unknown species id {rec.get('id')!r}")
            elements = rec.get("elements", {})
            if not elements:
                raise ValidationError(f"species {key}: element counts are required")
            try:
                mass = sum(atomic[el] * count for el, count in elements.items())
            except KeyError as exc:
                raise ValidationError(f"species {key}: no atomic mass for element {exc}") from exc
            species.append(
                Species(
                    species_id=_NAME_IDS[key],
                    formula=rec.get("formula", key),
                    phase=rec["phase"],
                    molar_mass=mass,
                    formation_enthalpy=rec["formation_enthalpy_j_per_mol"],
                    cp_coeffs=tuple(rec["heat_capacity_coeffs_j_per_mol_k"]),
                    molar_volume=rec.get("molar_volume_m3_per_mol", 0.0),
                    elements=dict(elements),
                )
            )
        kinetics = KineticsParams(
            pre_exponential=kin["A"], activation_energy=kin["Ea"], order=kin.get("order", 3)
        )
        return cls(species, kinetics)

    @classmethod
    def from_file(cls, path) -> "SpeciesSet":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "SpeciesSet":
        text = resources.files("calciflow").joinpath("data/species.json").read_text("utf-8")
        return cls.from_dict(json.loads(text))

    # -- internals ---------------------------------------------------------

    @staticmethod
    def _poly_eval(coeffs, T):
        # coeffs: (5 species, degree+1); Horner over ascending powers of T.
        T = np.asarray(T, dtype=float)[..., None]
        out = np.zeros(np.broadcast_shapes(T.shape, (N_SPECIES,)))
        for k in range(coeffs.shape[1] - 1, -1, -1):
            out = out * T + coeffs[:, k]
        return out

    def _validate_cp_positive(self):
        grid = np.linspace(T_MIN, 1400.0, 256)
        if np.any(self.cp_species(grid, check=False) <= 0.0):
            raise ValidationError("heat capacity polynomial non-positive inside 250-1400 K")

    def _check_T(self, T):
        T = np.asarray(T, dtype=float)
        if np.any(T < T_MIN) or np.any(T > T_MAX):
            raise DomainError(f"temperature outside [{T_MIN}, {T_MAX}] K")
        return T

    # -- per-species property tables ----------------------------------------

    def cp_species(self, T, check: bool = True):
        """Molar heat capacities, shape (..., 5), J/(mol K)."""
        if check:
            T = self._check_T(T)
        return self._poly_eval(self._cp_coeffs, T)

    def enthalpy_species(self, T, check: bool = True):
        """Molar enthalpies h_f + integral(cp, T_REF..T), shape (..., 5), J/mol."""
        if check:
            T = self._check_T(T)
        T = np.asarray(T, dtype=float)
        acc = self._poly_eval(self._h_coeffs, T)
        return self.formation_enthalpy + acc * T[..., None] - self._h_ref * T_REF

    # -- mixture properties --------------------------------------------------

    def _amounts(self, n):
        if isinstance(n, Composition):
            return n.moles
        return np.asarray(n, dtype=float)

    def enthalpy(self, T, P, n, check: bool = True):
        """Mixture enthalpy, J (or J/m3 for volumetric amounts)."""
        n = self._amounts(n)
        return (n * self.enthalpy_species(T, check=check)).sum(axis=-1)

    def volume(self, T, P, n, check: bool = True):
        """Mixture volume: incompressible solids plus ideal gas, m3."""
        if check:
            T = self._check_T(T)
        n = self._amounts(n)
        P = np.asarray(P, dtype=float)
        if check and np.any(P <= 0.0):
            raise DomainError("pressure must be > 0")
        n_gas = n[..., self.gas_mask].sum(axis=-1)
        v_solid = n @ self.molar_volume_solid
        return v_solid + n_gas * R_GAS * np.asarray(T, dtype=float) / P

    def internal_energy(self, T, P, n, check: bool = True):
        """U = H - P*V, exactly by construction."""
        return self.enthalpy(T, P, n, check=check) - np.asarray(P, dtype=float) * self.volume(
            T, P, n, check=check
        )

    def gas_fraction_volume(self, T, P, n, check: bool = False):
        """(solid volume, gas volume) split of `volume`."""
        n = self._amounts(n)
        v_solid = n @ self.molar_volume_solid
        n_gas = n[..., self.gas_mask].sum(axis=-1)
        v_gas = n_gas * R_GAS * np.asarray(T, dtype=float) / np.asarray(P, dtype=float)
        return v_solid, v_gas

    def mass(self, n):
        """Total mass of an amount vector, kg."""
        return self._amounts(n) @ self.molar_mass

    def element_totals(self, n):
        """Element amount vector (ordered by `element_names`), mol."""
        return self.element_matrix @ self._amounts(n)

    # -- temperature back-solves ---------------------------------------------

    def temperature_from_internal_energy(self, u_target, P, n, t_guess=800.0):
        """Invert U(T, P, n) = u_target for T inside [T_MIN, T_MAX].

        Safeguarded Newton with a bisection bracket; converges to
        |U(T) - u_target| <= 1e-8 * max(1, |u_target|).
        """
        return self._invert_scalar("internal_energy", u_target, P, n, t_guess)

    def temperature_from_enthalpy(self, h_target, P, n, t_guess=800.0):
        """Invert H(T, P, n) = h_target for T inside [T_MIN, T_MAX]."""
        return self._invert_scalar("enthalpy", h_target, P, n, t_guess)

    def _invert_scalar(self, kind, target, P, n, t_guess):
        n = self._amounts(n)
        if np.any(n < 0.0) or n.sum() <= 0.0:
            raise DomainError("temperature undefined for an empty or negative composition")
        prop = self.internal_energy if kind == "internal_energy" else self.enthalpy
        tol = 1e-8 * max(1.0, abs(target))

        def f(T):
            return float(prop(T, P, n, check=False)) - target

        lo, hi = T_MIN, T_MAX
        f_lo, f_hi = f(lo), f(hi)
        # Both property functions are strictly increasing in T (cp > 0 and,
        # for U, cv = cp - R > 0 for ideal gases).
        if f_lo > 0.0 or f_hi < 0.0:
            raise ConvergenceError(
                f"target {target:.6g} outside property range [{f_lo + target:.6g}, "
                f"{f_hi + target:.6g}] for T in [{T_MIN}, {T_MAX}] K",
                residual_norm=min(abs(f_lo), abs(f_hi)),
            )
        T = min(max(float(t_guess), lo), hi)
        for _ in range(100):
            fT = f(T)
            dfdT_at = float(
                np.dot(n, self.cp_species(T, check=False))
                - n[self.gas_mask].sum() * (R_GAS if kind == "internal_energy" else 0.0)
            )
            # The residual bound alone can leave dT ~ tol/cp; also require the
            # Newton correction itself to be below 1e-7 K for a tight round trip.
            if abs(fT) <= tol and (dfdT_at <= 0.0 or abs(fT / dfdT_at) <= 1e-7):
                return T
            if fT > 0.0:
                hi = T
            else:
                lo = T
            T_new = T - fT / dfdT_at if dfdT_at > 0.0 else 0.5 * (lo + hi)
            if not (lo < T_new < hi):
                T_new = 0.5 * (lo + hi)
            T = T_new
        raise ConvergenceError(
            "temperature inversion did not converge", residual_norm=abs(f(T)), iterations=100
        )

    # -- kinetics --------------------------------------------------------------

    def rate_constant(self, T, check: bool = True):
        """Arrhenius k(T) of the dehydroxylation law."""
        if check:
            T = self._check_T(T)
        T = np.maximum(np.asarray(T, dtype=float), 1.0)
        kin = self.kinetics
        return kin.pre_exponential * np.exp(-kin.activation_energy / (R_GAS * T))

    def reaction_rate(self, T, c, check: bool = True):
        """Volumetric production rates R, shape (..., 5), mol/(m3 s).

        Third order in the kaolinite concentration: r = k(T) * c_kao^3 with
        stoichiometry (-1, +1, +2, 0, 0).  Negative concentrations are
        clamped so the rate vanishes smoothly when kaolinite is exhausted.
        """
        c = self._amounts(c)
        if check and np.any(c < 0.0):
            raise DomainError("concentrations must be non-negative")
        c_kao = np.maximum(c[..., SpeciesId.KAOLINITE], 0.0)
        r = self.rate_constant(T, check=check) * c_kao**3
        return np.asarray(r)[..., None] * STOICHIOMETRY
