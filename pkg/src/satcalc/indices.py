"""Spectral index target maps (NDVI, GNDVI, SAVI, EVI, NDWI).

All formulas run in float64 on the float32 band values and are stored back as
float32.  A pixel whose denominator magnitude falls below ``denom_eps`` becomes
nodata instead of +-inf.
"""
import enum
from dataclasses import dataclass

import numpy as np

from . import kernels
from .grid import Grid2D, GridError


class IndexKind(enum.Enum):
    NDVI = "ndvi"
    GNDVI = "gndvi"
    SAVI = "savi"
    EVI = "evi"
    NDWI = "ndwi"

    @classmethod
    def parse(cls, name):
        try:
            return cls(str(name).lower())
        except ValueError:
            raise ValueError(
                f"unknown index kind {name!r}; expected one of {', '.join(k.value for k in cls)}"
            ) from None


@dataclass(frozen=True)
class IndexParams:
    savi_L: float = 0.5
    evi_G: float = 2.5
    evi_C1: float = 6.0
    evi_C2: float = 7.5
    evi_L: float = 1.0
    denom_eps: float = 1e-8

    def __post_init__(self):
        if self.savi_L < 0:
            raise ValueError("savi_L must be >= 0")
        if self.evi_G <= 0:
            raise ValueError("evi_G must be > 0")
        if self.denom_eps <= 0:
            raise ValueError("denom_eps must be > 0")


def _flat(g):
    return np.ascontiguousarray(g.values, dtype=np.float64).ravel()


def _wrap(out, ok, shape):
    return Grid2D(out.reshape(shape).astype(np.float32), ok.reshape(shape))


def normalized_difference(a, b, eps=1e-8):
    """Per-pixel ``(a - b) / (a + b)``."""
    if a.shape != b.shape:
        raise GridError(f"shape mismatch {a.shape} vs {b.shape}")
    valid = np.ascontiguousarray(a.valid & b.valid).ravel()
    out, ok = kernels.normalized_difference(_flat(a), _flat(b), valid, float(eps))
    return _wrap(out, ok, a.shape)


def ndvi(x, p=IndexParams()):
    return normalized_difference(x.nir, x.red, p.denom_eps)


def gndvi(x, p=IndexParams()):
    return normalized_difference(x.nir, x.green, p.denom_eps)


def ndwi(x, p=IndexParams()):
    return normalized_difference(x.green, x.nir, p.denom_eps)


def savi(x, p=IndexParams()):
    valid = np.ascontiguousarray(x.valid).ravel()
    out, ok = kernels.savi(_flat(x.nir), _flat(x.red), valid, float(p.savi_L), float(p.denom_eps))
    return _wrap(out, ok, x.shape)


def evi(x, p=IndexParams()):
    """Enhanced vegetation index; deliberately left unclamped."""
    valid = np.ascontiguousarray(x.valid).ravel()
    out, ok = kernels.evi(
        _flat(x.nir), _flat(x.red), _flat(x.blue), valid,
        float(p.evi_G), float(p.evi_C1), float(p.evi_C2), float(p.evi_L), float(p.denom_eps),
    )
    return _wrap(out, ok, x.shape)


_DISPATCH = {
    IndexKind.NDVI: ndvi,
    IndexKind.GNDVI: gndvi,
    IndexKind.SAVI: savi,
    IndexKind.EVI: evi,
    IndexKind.NDWI: ndwi,
}


def compute_index(kind, x, p=IndexParams()):
    if not isinstance(kind, IndexKind):
        kind = IndexKind.parse(kind)
    return _DISPATCH[kind](x, p)
