"""Structural targets: aboveground biomass from canopy height, carbon stock from biomass."""
import enum
from dataclasses import dataclass

import numpy as np

from .grid import Grid2D


class ForestType(enum.Enum):
    CONIFEROUS = "coniferous"
    BROADLEAF = "broadleaf"
    MIXED = "mixed"
    GENERAL = "general"


_COEFFS = {
    ForestType.CONIFEROUS: (0.118, 2.53),
    ForestType.BROADLEAF: (0.052, 2.69),
    ForestType.MIXED: (0.067, 2.58),
    ForestType.GENERAL: (0.067, 2.58),
}


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class AllometricCoeffs:
    """``AGB = a * H**b`` with AGB in t/ha and H in metres."""

    a: float
    b: float
    forest_type: ForestType = ForestType.GENERAL

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("allometric coefficients must be positive")


@dataclass(frozen=True)
class CarbonParams:
    CF: float = 0.47

    def __post_init__(self):
        if not 0 < self.CF < 1:
            raise ValueError("carbon fraction must lie in (0, 1)")


def coeffs_for(forest_type="general"):
    if not isinstance(forest_type, ForestType):
        try:
            forest_type = ForestType(str(forest_type).lower())
        except ValueError:
            names = ", ".join(t.value for t in ForestType)
            raise ValueError(f"unknown forest type {forest_type!r}; expected one of {names}") from None
    a, b = _COEFFS[forest_type]
    return AllometricCoeffs(a, b, forest_type)


def agb_values(height, a, b):
    """float64 kernel: ``a * height**b`` on a plain array."""
    return a * np.power(np.asarray(height, np.float64), b)


def agb_from_height(h, c=None, cap=None):
    """Biomass map in t/ha.  ``cap`` (metres) clips heights first; off by default."""
    c = c or coeffs_for("general")
    hv = h.values.astype(np.float64)
    if np.any(hv[h.valid] < 0):
        raise DomainError("negative canopy height at a valid pixel")
    if cap is not None:
        hv = np.minimum(hv, cap)
    out = np.where(h.valid, agb_values(hv, c.a, c.b), 0.0)
    return Grid2D(out.astype(np.float32), h.valid)


def carbon_values(agb, cf):
    return np.asarray(agb, np.float64) * cf


def carbon_stock(agb, p=CarbonParams()):
    """Carbon stock map in tC/ha."""
    av = agb.values.astype(np.float64)
    if np.any(av[agb.valid] < 0):
        raise DomainError("negative biomass at a valid pixel")
    out = np.where(agb.valid, carbon_values(av, p.CF), 0.0)
    return Grid2D(out.astype(np.float32), agb.valid)
