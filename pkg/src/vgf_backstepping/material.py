"""Material constants, geometry and phase bookkeeping."""
from dataclasses import dataclass

from .errors import ParameterError

__all__ = ["SOLID", "LIQUID", "PHASES", "PhaseParams", "StefanConfig",
           "thermal_diffusivity", "stefan_coefficient", "other_phase"]

SOLID = "solid"
LIQUID = "liquid"
PHASES = (SOLID, LIQUID)


def other_phase(phase):
    if phase == SOLID:
        return LIQUID
    if phase == LIQUID:
        return SOLID
    raise ParameterError(f"unknown phase {phase!r}")


@dataclass(frozen=True)
class PhaseParams:
    """Piecewise constant material data of one phase (SI units).

    ``orientation`` is -1 for the solid (crucible bottom) and +1 for the
    liquid (crucible top); ``boundary_coord`` is the position of the heated
    boundary of that phase.
    """

    density: float
    specific_heat: float
    conductivity: float
    orientation: int
    boundary_coord: float

    def __post_init__(self):
        for name in ("density", "specific_heat", "conductivity"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be strictly positive, got {getattr(self, name)}")
        if self.orientation not in (-1, 1):
            raise ParameterError(f"orientation must be -1 or +1, got {self.orientation}")

    @property
    def diffusivity(self):
        return thermal_diffusivity(self)

    @property
    def heat_capacity(self):
        """Volumetric heat capacity rho*c."""
        return self.density * self.specific_heat


def thermal_diffusivity(p):
    """Thermal diffusivity ``lambda / (rho c)`` in m^2/s."""
    if not (p.conductivity > 0 and p.density > 0 and p.specific_heat > 0):
        raise ParameterError("material constants must be strictly positive")
    return p.conductivity / (p.density * p.specific_heat)


@dataclass(frozen=True)
class StefanConfig:
    solid: PhaseParams
    liquid: PhaseParams
    melting_temp: float
    melt_density: float
    latent_heat: float

    def __post_init__(self):
        if self.solid.orientation != -1:
            raise ParameterError("solid phase must have orientation -1")
        if self.liquid.orientation != 1:
            raise ParameterError("liquid phase must have orientation +1")
        if not self.solid.boundary_coord < self.liquid.boundary_coord:
            raise ParameterError("solid boundary must lie below the liquid boundary")
        if not self.melting_temp > 0:
            raise ParameterError("melting temperature must be positive")
        if not self.melt_density > 0:
            raise ParameterError("melt density must be positive")
        if not self.latent_heat > 0:
            raise ParameterError("latent heat must be positive")

    def phase(self, name):
        if name == SOLID:
            return self.solid
        if name == LIQUID:
            return self.liquid
        raise ParameterError(f"unknown phase {name!r}")

    @property
    def domain(self):
        return self.solid.boundary_coord, self.liquid.boundary_coord

    @property
    def extent(self):
        """Crucible length, the maximal extent of either phase."""
        return self.liquid.boundary_coord - self.solid.boundary_coord

    def kappa(self, phase):
        return stefan_coefficient(self, phase)

    def phase_length(self, phase, gamma):
        """Extent of ``phase`` for interface position ``gamma``."""
        p = self.phase(phase)
        return p.orientation * (p.boundary_coord - gamma)


def stefan_coefficient(cfg, phase):
    """Coefficient ``-beta lambda / (L rho_melt)`` of the moving-frame Stefan condition."""
    p = cfg.phase(phase)
    return -p.orientation * p.conductivity / (cfg.latent_heat * cfg.melt_density)
