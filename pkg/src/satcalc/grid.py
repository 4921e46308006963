"""Raster planes, band stacks and the geometric transforms used for augmentation."""
from dataclasses import dataclass, field

import numpy as np

from . import kernels

BAND_NAMES = ("B2", "B3", "B4", "B8")
WAVELENGTHS_NM = (490, 560, 665, 842)


class GridError(ValueError):
    pass


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Grid2D:
    """One float32 raster plane plus its validity mask (True = data).

    Nodata pixels always hold 0.0 so stored values are never NaN.
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        valid = np.asarray(self.valid, dtype=bool)
        if values.ndim != 2:
            raise GridError(f"grid values must be 2-D, got shape {values.shape}")
        if valid.shape != values.shape:
            raise GridError(f"mask shape {valid.shape} != values shape {values.shape}")
        if not np.all(np.isfinite(values[valid])):
            raise GridError("non-finite value at a valid pixel")
        if np.any(values[~valid] != 0.0):
            values = np.where(valid, values, np.float32(0.0))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "valid", _frozen(valid))

    @classmethod
    def from_array(cls, values, valid=None):
        """Wrap an array; non-finite entries become nodata when no mask is given."""
        values = np.asarray(values, dtype=np.float64)
        if valid is None:
            valid = np.isfinite(values)
        else:
            valid = np.asarray(valid, dtype=bool) & np.isfinite(values)
        return cls(np.where(valid, values, 0.0).astype(np.float32), valid)

    @classmethod
    def full(cls, height, width, value):
        return cls(np.full((height, width), value, dtype=np.float32), np.ones((height, width), bool))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def masked(self, extra_valid):
        """Copy with validity restricted to ``extra_valid``."""
        return Grid2D(self.values, self.valid & np.asarray(extra_valid, bool))

    def __eq__(self, other):
        if not isinstance(other, Grid2D):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.valid, other.valid)
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None

    def __repr__(self):
        return f"Grid2D({self.height}x{self.width}, valid={int(self.valid.sum())})"


@dataclass(frozen=True, eq=False)
class BandStack:
    """Four reflectance planes in the fixed order B2, B3, B4, B8.

    A pixel is valid only where all four bands are valid; the constructor
    applies that joint mask to every band.
    """

    bands: tuple
    resolution_m: float = 1.5
    wavelengths_nm: tuple = field(default=WAVELENGTHS_NM)

    def __post_init__(self):
        bands = tuple(self.bands)
        if len(bands) != 4:
            raise GridError(f"a BandStack needs exactly 4 bands, got {len(bands)}")
        shape = bands[0].shape
        if any(b.shape != shape for b in bands):
            raise GridError("all bands must share the same shape")
        joint = np.logical_and.reduce([b.valid for b in bands])
        for b in bands:
            if np.any(b.values[joint] < 0):
                raise GridError("negative reflectance at a valid pixel")
        bands = tuple(b if np.array_equal(b.valid, joint) else Grid2D(b.values, joint) for b in bands)
        object.__setattr__(self, "bands", bands)
        object.__setattr__(self, "wavelengths_nm", tuple(self.wavelengths_nm))

    @classmethod
    def from_array(cls, cube, valid=None, resolution_m=1.5):
        """Build from a ``(4, H, W)`` array and optional ``(H, W)`` or ``(4, H, W)`` mask."""
        cube = np.asarray(cube)
        if cube.ndim != 3 or cube.shape[0] != 4:
            raise GridError(f"expected a (4, H, W) cube, got {cube.shape}")
        if valid is None:
            masks = [None] * 4
        else:
            valid = np.asarray(valid, bool)
            masks = [valid] * 4 if valid.ndim == 2 else list(valid)
        return cls(tuple(Grid2D.from_array(cube[i], masks[i]) for i in range(4)), resolution_m)

    @property
    def blue(self):
        return self.bands[0]

    @property
    def green(self):
        return self.bands[1]

    @property
    def red(self):
        return self.bands[2]

    @property
    def nir(self):
        return self.bands[3]

    @property
    def shape(self):
        return self.bands[0].shape

    @property
    def valid(self):
        return self.bands[0].valid

    def to_array(self):
        return np.stack([b.values for b in self.bands])

    def map(self, fn):
        """Apply a Grid2D -> Grid2D transform to every band."""
        return BandStack(tuple(fn(b) for b in self.bands), self.resolution_m, self.wavelengths_nm)

    def __eq__(self, other):
        if not isinstance(other, BandStack):
            return NotImplemented
        return all(a == b for a, b in zip(self.bands, other.bands))

    __hash__ = None


def rotate90(g, k):
    """Rotate counter-clockwise by ``k`` quarter turns (k is reduced mod 4)."""
    k = int(k) % 4
    if k == 0:
        return g
    return Grid2D(np.rot90(g.values, k), np.rot90(g.valid, k))


def rotate_window(row0, col0, h, w, height, width, k):
    """Where the window ``(row0, col0, h, w)`` of a ``height x width`` grid lands
    after :func:`rotate90` by ``k``.  Returns ``(row0, col0, h, w)``."""
    k = int(k) % 4
    for _ in range(k):
        row0, col0, h, w = width - col0 - w, row0, w, h
        height, width = width, height
    return row0, col0, h, w


def resample_bilinear(g, scale):
    """Pixel-centre bilinear resampling with edge clamping.

    Output dims are ``round(dim * scale)``.  An output pixel is nodata when any
    source pixel carrying non-zero weight is nodata.
    """
    scale = float(scale)
    if not scale > 0:
        raise GridError(f"scale must be positive, got {scale}")
    out_h = int(round(g.height * scale))
    out_w = int(round(g.width * scale))
    if out_h < 1 or out_w < 1:
        raise GridError(f"scale {scale} collapses a {g.height}x{g.width} grid")
    if (out_h, out_w) == g.shape:
        return g
    out, ok = kernels.bilinear(g.values, g.valid, out_h, out_w)
    return Grid2D(out.astype(np.float32), ok)


def crop(g, row0, col0, h, w):
    """Exact sub-grid; the window must lie fully inside ``g``."""
    if h < 0 or w < 0 or row0 < 0 or col0 < 0 or row0 + h > g.height or col0 + w > g.width:
        raise GridError(f"window ({row0}, {col0}, {h}, {w}) outside a {g.height}x{g.width} grid")
    return Grid2D(g.values[row0:row0 + h, col0:col0 + w], g.valid[row0:row0 + h, col0:col0 + w])


def center_fit(g, h, w):
    """Center-crop or zero-pad (as nodata) to exactly ``h x w``."""
    values = np.zeros((h, w), np.float32)
    valid = np.zeros((h, w), bool)
    sh = min(h, g.height)
    sw = min(w, g.width)
    src_r = (g.height - sh) // 2
    src_c = (g.width - sw) // 2
    dst_r = (h - sh) // 2
    dst_c = (w - sw) // 2
    values[dst_r:dst_r + sh, dst_c:dst_c + sw] = g.values[src_r:src_r + sh, src_c:src_c + sw]
    valid[dst_r:dst_r + sh, dst_c:dst_c + sw] = g.valid[src_r:src_r + sh, src_c:src_c + sw]
    return Grid2D(values, valid)
