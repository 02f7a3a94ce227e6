"""Radio materials and the specular reflection coefficient.

Material constants follow the ITU-R P.2040 building-material tables at
3.5 GHz; the complex relative permittivity uses the P.2040 imaginary-part
convention eta = eps_r - j * 17.98 * sigma / f_GHz.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

from .errors import ConfigError


@dataclass(frozen=True)
class Material:
    name: str
    eps_r: float
    sigma_s_per_m: float
    scatter_s: float = 0.0
    xpd_kx: float = 0.0
    thickness_m: float = 0.1

    def __post_init__(self):
        if self.eps_r < 1.0:
            raise ConfigError(f"{self.name}: eps_r must be >= 1")
        if self.sigma_s_per_m < 0.0:
            raise ConfigError(f"{self.name}: conductivity must be >= 0")
        for v, label in ((self.scatter_s, "S"), (self.xpd_kx, "K_x")):
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{self.name}: {label} must be in [0, 1]")


CONCRETE = Material("concrete", eps_r=18.18, sigma_s_per_m=0.765,
                    scatter_s=0.0, xpd_kx=0.0, thickness_m=0.30)
WOOD = Material("wood", eps_r=5.72, sigma_s_per_m=0.001,
                scatter_s=0.4, xpd_kx=0.4, thickness_m=0.10)
GLASS = Material("glass", eps_r=5.24, sigma_s_per_m=0.123,
                 scatter_s=0.4, xpd_kx=0.4, thickness_m=0.05)
SKY = Material("sky", eps_r=1.0, sigma_s_per_m=0.0,
               scatter_s=0.0, xpd_kx=0.0, thickness_m=0.0)

MATERIALS = {m.name: m for m in (CONCRETE, WOOD, GLASS, SKY)}

# Fixed flat-shading palette for the POV RGB channels (0-255 per component).
MATERIAL_RGB = {
    "concrete": (128, 128, 128),
    "wood": (139, 90, 43),
    "glass": (70, 130, 180),
    "sky": (135, 206, 235),
}
GROUND_RGB = (80, 110, 60)


def complex_permittivity(material: Material, carrier_hz: float) -> complex:
    """eta = eps_r - j * 17.98 * sigma / f_GHz (ITU-R P.2040 convention)."""
    f_ghz = carrier_hz / 1e9
    return complex(material.eps_r, -17.98 * material.sigma_s_per_m / f_ghz)


def fresnel_reflection(material: Material, incidence_angle_rad: float,
                       carrier_hz: float) -> complex:
    """TE (horizontal polarization) reflection coefficient.

    The incidence angle is measured from the surface normal and must lie in
    [0, pi/2).  |Gamma| <= 1 for any passive material.
    """
    if not 0.0 <= incidence_angle_rad < math.pi / 2:
        raise ConfigError(f"incidence angle {incidence_angle_rad} outside [0, pi/2)")
    if carrier_hz <= 0:
        raise ConfigError("carrier frequency must be > 0")
    eta = complex_permittivity(material, carrier_hz)
    cos_i = math.cos(incidence_angle_rad)
    sin_i = math.sin(incidence_angle_rad)
    root = cmath.sqrt(eta - sin_i * sin_i)
    return (cos_i - root) / (cos_i + root)
