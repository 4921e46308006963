"""Paired multi-task samples: scene synthesis, target construction, patching,
augmentation, splits and on-disk manifests."""
import enum
import os
from dataclasses import dataclass, field

import numpy as np

from . import kernels, tensorio
from .ecovars import CarbonParams, agb_from_height, carbon_stock, coeffs_for
from .grid import BandStack, Grid2D, GridError, center_fit, crop, resample_bilinear, rotate90
from .indices import IndexParams, evi, gndvi, ndvi, ndwi, savi

DEFAULT_HEIGHT_CAP = 60.0


class TaskId(enum.Enum):
    NDVI = 0
    GNDVI = 1
    SAVI = 2
    EVI = 3
    NDWI = 4
    H = 5
    AGB = 6
    CS = 7

    @property
    def ordinal(self):
        return self.value

    @property
    def unit(self):
        return _UNITS[self]

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise ValueError(f"unknown task {name!r}; expected one of {', '.join(t.name for t in cls)}") from None

    @classmethod
    def parse_list(cls, text):
        """``"all"`` or a comma-separated list of task names."""
        if text is None or str(text).strip().lower() == "all":
            return list(cls)
        tasks = sorted({cls.parse(t.strip()) for t in str(text).split(",") if t.strip()}, key=lambda t: t.value)
        if not tasks:
            raise ValueError("empty task list")
        return tasks


_UNITS = {
    TaskId.NDVI: "unitless",
    TaskId.GNDVI: "unitless",
    TaskId.SAVI: "unitless",
    TaskId.EVI: "unitless",
    TaskId.NDWI: "unitless",
    TaskId.H: "m",
    TaskId.AGB: "t/ha",
    TaskId.CS: "tC/ha",
}

ALL_TASKS = tuple(TaskId)
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# seeds

_MASK64 = (1 << 64) - 1


def splitmix64(x):
    """The SplitMix64 finaliser on a 64-bit integer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def mix_seed(seed, index):
    """Per-item seed: ``splitmix64(splitmix64(seed) XOR index)``.

    Depends only on (seed, index), so items can be built in any order.
    """
    return splitmix64(splitmix64(int(seed) & _MASK64) ^ (int(index) & _MASK64))


def _rng(seed, *path):
    s = int(seed) & _MASK64
    for p in path:
        s = mix_seed(s, p)
    return np.random.default_rng(s)


# ---------------------------------------------------------------------------
# types


@dataclass(eq=False)
class Sample:
    id: str
    x: BandStack
    y: dict
    loss_mask: np.ndarray = None

    def __post_init__(self):
        shape = self.x.shape
        if set(self.y) != set(ALL_TASKS):
            raise ValueError(f"sample {self.id} must carry all eight targets")
        for t, g in self.y.items():
            if g.shape != shape:
                raise GridError(f"target {t.name} shape {g.shape} != patch shape {shape}")
        mask = joint_mask(self.x, self.y)
        if self.loss_mask is not None:
            mask = mask & np.asarray(self.loss_mask, bool)
        self.loss_mask = mask

    @property
    def shape(self):
        return self.x.shape


def joint_mask(x, y):
    """Conjunction of the band mask and every target mask."""
    mask = x.valid.copy()
    for g in y.values():
        mask &= g.valid
    return mask


@dataclass(frozen=True)
class AugmentSpec:
    scale_range: tuple = (0.5, 2.0)
    rotations: tuple = (0, 1, 2, 3)
    enabled: bool = True

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad scale range {self.scale_range}")
        if not self.rotations or any(int(k) not in (0, 1, 2, 3) for k in self.rotations):
            raise ValueError(f"rotations must be drawn from 0..3, got {self.rotations}")


@dataclass
class ManifestRecord:
    id: str
    split: str
    bands_path: str
    targets_path: str


@dataclass
class Manifest:
    records: list
    seed: int = 0
    patch_size: int = 0
    params: dict = field(default_factory=dict)
    root: str = "."

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest ids must be unique")

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.root, path)


# ---------------------------------------------------------------------------
# scene synthesis

_SOIL = np.array([0.10, 0.14, 0.18, 0.25])
_VEG = np.array([0.03, 0.07, 0.04, 0.45])
_WATER = np.array([0.08, 0.07, 0.05, 0.02])


def value_noise(rng, h, w, cells, octaves=3, persistence=0.5):
    """Fractal value noise in [0, 1]: ``octaves`` smoothstep-interpolated random
    lattices, each with twice the frequency of the previous one."""
    total = np.zeros((h, w))
    amp = 1.0
    norm = 0.0
    for o in range(octaves):
        n_cells = cells * 2 ** o
        cell = max(h, w) / n_cells
        lattice = rng.random((int(np.ceil(h / cell)) + 2, int(np.ceil(w / cell)) + 2))
        total += amp * kernels.lattice_interp(lattice, h, w, cell)
        norm += amp
        amp *= persistence
    return total / norm


def synth_scene(seed, h, w):
    """Deterministic desk-scale scene: ``(BandStack, height Grid2D)``.

    Canopy height (0..60 m) comes from fractal value noise; reflectance mixes
    soil, vegetation and water spectra according to height and a wetness field,
    so the bands carry information about the structural targets.  Some scenes
    get a small nodata blob.
    """
    if h < 8 or w < 8:
        raise ValueError(f"scene must be at least 8x8, got {h}x{w}")
    rng = _rng(seed, 0)
    canopy = value_noise(rng, h, w, cells=3, octaves=3)
    wet = value_noise(rng, h, w, cells=2, octaves=2)
    grain = value_noise(rng, h, w, cells=max(2, min(h, w) // 4), octaves=2)

    # stretch so both bare ground and tall stands occur
    height = np.clip((canopy - 0.3) / 0.45, 0.0, 1.0) ** 1.5 * 60.0
    water = np.clip((0.28 - wet) / 0.08, 0.0, 1.0)
    height = height * (1.0 - water)
    # cover keeps rising up to the tallest stands so reflectance stays informative
    veg = (height / 60.0) ** 0.7

    mix = ((1.0 - veg)[..., None] * _SOIL + veg[..., None] * _VEG) * (1.0 - water[..., None])
    mix = mix + water[..., None] * _WATER
    tint = 0.85 + 0.3 * grain
    cube = np.clip(mix * tint[..., None] + rng.normal(0.0, 0.002, (h, w, 4)), 0.0, 1.0)
    cube = np.moveaxis(cube, -1, 0)

    valid = np.ones((h, w), bool)
    if rng.random() < 0.3:
        bh, bw = max(1, h // 6), max(1, w // 6)
        r0 = int(rng.integers(0, h - bh + 1))
        c0 = int(rng.integers(0, w - bw + 1))
        valid[r0:r0 + bh, c0:c0 + bw] = False

    x = BandStack.from_array(cube.astype(np.float32), valid)
    hgrid = Grid2D.from_array(np.clip(height, 0.0, 60.0).astype(np.float32), valid)
    return x, hgrid


# ---------------------------------------------------------------------------
# targets


def build_targets(x, h, p=IndexParams(), c=None, cp=CarbonParams(), height_cap=None):
    """All eight targets.  H passes through unchanged; ``height_cap`` only
    limits the height fed into the biomass model."""
    if x.shape != h.shape:
        raise GridError(f"band shape {x.shape} != height shape {h.shape}")
    c = c or coeffs_for("general")
    agb = agb_from_height(h, c, cap=height_cap)
    return {
        TaskId.NDVI: ndvi(x, p),
        TaskId.GNDVI: gndvi(x, p),
        TaskId.SAVI: savi(x, p),
        TaskId.EVI: evi(x, p),
        TaskId.NDWI: ndwi(x, p),
        TaskId.H: h,
        TaskId.AGB: agb,
        TaskId.CS: carbon_stock(agb, cp),
    }


def _crop_bands(x, r, c, ph, pw):
    return x.map(lambda g: crop(g, r, c, ph, pw))


def extract_patches(x, h, patch, n, seed, max_nodata_frac=0.5, max_retries=100, prefix="s",
                    p=IndexParams(), c=None, cp=CarbonParams(), height_cap=DEFAULT_HEIGHT_CAP):
    """``n`` random square patches; patch ``i`` draws its offset from ``mix_seed(seed, i)``.

    Offsets whose joint nodata fraction exceeds ``max_nodata_frac`` are redrawn
    up to ``max_retries`` times.
    """
    H, W = x.shape
    if patch > min(H, W) or patch < 1:
        raise ValueError(f"patch {patch} does not fit a {H}x{W} scene")
    if not 0 <= max_nodata_frac < 1:
        raise ValueError("max_nodata_frac must lie in [0, 1)")
    full = build_targets(x, h, p, c, cp, height_cap)
    mask = joint_mask(x, full)
    samples = []
    for i in range(n):
        rng = _rng(seed, i)
        for _ in range(max_retries):
            r = int(rng.integers(0, H - patch + 1))
            q = int(rng.integers(0, W - patch + 1))
            bad = 1.0 - mask[r:r + patch, q:q + patch].mean()
            if bad <= max_nodata_frac:
                break
        else:
            raise RuntimeError(f"patch {i}: no window with nodata fraction <= {max_nodata_frac} "
                               f"after {max_retries} draws")
        y = {t: crop(g, r, q, patch, patch) for t, g in full.items()}
        samples.append(Sample(f"{prefix}{i:05d}", _crop_bands(x, r, q, patch, patch), y))
    return samples


def _geom(g, k, scale, ph, pw):
    return center_fit(resample_bilinear(rotate90(g, k), scale), ph, pw)


def draw_augmentation(spec, seed):
    rng = _rng(seed, 1)
    k = int(spec.rotations[int(rng.integers(0, len(spec.rotations)))])
    lo, hi = spec.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return k, scale


def augment(s, spec, seed, p=IndexParams(), c=None, cp=CarbonParams(), height_cap=DEFAULT_HEIGHT_CAP,
            k=None, scale=None):
    """Rotate and rescale a sample, then rebuild every derived target.

    Bands and height are transformed geometrically; the five indices, AGB and
    CS are recomputed from the transformed maps.  ``k``/``scale`` override the
    seeded draw.
    """
    if not spec.enabled:
        return s
    dk, dscale = draw_augmentation(spec, seed)
    k = dk if k is None else int(k) % 4
    scale = dscale if scale is None else float(scale)
    ph, pw = s.shape
    x = s.x.map(lambda g: _geom(g, k, scale, ph, pw))
    h = _geom(s.y[TaskId.H], k, scale, ph, pw)
    return Sample(s.id, x, build_targets(x, h, p, c, cp, height_cap))


def split_counts(n, fractions):
    """Largest-remainder rounding so the three counts sum to ``n``."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    raw = fr * n
    counts = np.floor(raw + 1e-9).astype(int)
    rem = raw - counts
    for i in np.argsort(-rem, kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return [int(v) for v in counts]


def split_manifest(samples, fractions=(0.8, 0.1, 0.1), seed=0, paths=None, patch_size=0, params=None, root="."):
    """Seeded shuffle, then contiguous train/val/test partition."""
    counts = split_counts(len(samples), fractions)
    order = _rng(seed, 2).permutation(len(samples))
    tags = [None] * len(samples)
    pos = 0
    for name, cnt in zip(SPLITS, counts):
        for j in order[pos:pos + cnt]:
            tags[j] = name
        pos += cnt
    records = []
    for i, s in enumerate(samples):
        sid = s.id if hasattr(s, "id") else str(s)
        bpath, tpath = paths[i] if paths else (f"{sid}.bands.satc", f"{sid}.targets.satc")
        records.append(ManifestRecord(sid, tags[i], bpath, tpath))
    return Manifest(records, seed, patch_size, dict(params or {}), root)


# ---------------------------------------------------------------------------
# on-disk layout


def save_sample(directory, s):
    bpath = os.path.join(directory, f"{s.id}.bands.satc")
    tpath = os.path.join(directory, f"{s.id}.targets.satc")
    tensorio.write_bands(bpath, s.x)
    cube = np.stack([s.y[t].values for t in ALL_TASKS])
    masks = np.stack([s.y[t].valid for t in ALL_TASKS])
    tensorio.write_masked(tpath, cube, masks)
    return os.path.basename(bpath), os.path.basename(tpath)


def load_targets(path):
    values, valid = tensorio.read_masked(path)
    if values.ndim != 3 or values.shape[0] != len(ALL_TASKS):
        raise tensorio.TensorFormatError(f"{path}: expected an (8, H, W) target stack, got {values.shape}")
    if valid.ndim == 2:
        valid = np.broadcast_to(valid, values.shape)
    return {t: Grid2D.from_array(values[t.value], valid[t.value]) for t in ALL_TASKS}


def load_sample(manifest, record):
    x = tensorio.read_bands(manifest.resolve(record.bands_path))
    y = load_targets(manifest.resolve(record.targets_path))
    return Sample(record.id, x, y)


def write_manifest(path, m):
    lines = [f"# seed={m.seed}", f"# patch_size={m.patch_size}"]
    lines += [f"# {k}={v}" for k, v in sorted(m.params.items())]
    lines += ["\t".join((r.id, r.split, r.bands_path, r.targets_path)) for r in m.records]
    tensorio.atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(path):
    records = []
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 4 or parts[1] not in SPLITS:
                raise ValueError(f"{path}:{lineno}: malformed manifest record")
            records.append(ManifestRecord(*parts))
    seed = int(meta.pop("seed", 0))
    patch = int(meta.pop("patch_size", 0))
    return Manifest(records, seed, patch, meta, os.path.dirname(os.path.abspath(path)))
