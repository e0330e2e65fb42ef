"""Raster files, band handling, patch geometry and synthetic flood scenes.

Rasters live in memory as ``(bands, height, width)`` float32 arrays. Labels
are single-band rasters holding 0 (dry), 1 (water) or 255 (nodata).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    BadMagicError,
    ConfigError,
    DimensionOverflowError,
    FormatError,
    ShapeError,
    TruncatedError,
)

RASTER_MAGIC = b"MBR1"
_RASTER_HEADER = struct.Struct("<4sIIHH")
MAX_ELEMENTS = 2**31 - 1

NODATA = 255.0
PATCH = 128
TRAIN_STRIDE = 64
TEST_STRIDE = 128
DEFAULT_SCALE = 10000.0
SYNTH_BANDS = ("R", "G", "B", "NIR")
DERIVED_BANDS = ("NDWI",)


@dataclass
class Raster:
    data: np.ndarray
    band_names: tuple = ()

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ShapeError(f"raster data must be (bands, height, width), got {self.data.shape}")
        if not self.band_names:
            self.band_names = tuple(f"b{i}" for i in range(self.bands))
        self.band_names = tuple(str(n) for n in self.band_names)
        if len(self.band_names) != self.bands:
            raise ShapeError(f"{len(self.band_names)} band names for {self.bands} bands")
        for name in self.band_names:
            if "," in name or not name:
                raise ValueError(f"invalid band name {name!r}")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def band(self, name: str) -> np.ndarray:
        try:
            return self.data[self.band_names.index(name)]
        except ValueError:
            raise KeyError(f"raster has no band {name!r}; bands are {self.band_names}") from None


def save_raster(raster: Raster, path) -> None:
    if raster.width > 0xFFFFFFFF or raster.height > 0xFFFFFFFF or raster.bands > 0xFFFF:
        raise DimensionOverflowError(f"raster dims {raster.data.shape} exceed the header fields")
    names = ",".join(raster.band_names).encode("utf-8")
    if len(names) > 0xFFFF:
        raise DimensionOverflowError("band name block longer than 65535 bytes")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_RASTER_HEADER.pack(RASTER_MAGIC, raster.width, raster.height,
                                     raster.bands, len(names)))
        fh.write(names)
        fh.write(raster.data.astype("<f4").tobytes())
    tmp.replace(path)


def load_raster(path) -> Raster:
    data = Path(path).read_bytes()
    if len(data) < _RASTER_HEADER.size:
        raise TruncatedError(f"{path}: file ends inside the raster header")
    magic, width, height, bands, nlen = _RASTER_HEADER.unpack_from(data)
    if magic != RASTER_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {RASTER_MAGIC!r}")
    count = width * height * bands
    if count > MAX_ELEMENTS:
        raise DimensionOverflowError(f"{path}: {width}x{height}x{bands} raster is too large")
    start = _RASTER_HEADER.size + nlen
    if len(data) < start:
        raise TruncatedError(f"{path}: file ends inside the band names")
    names = data[_RASTER_HEADER.size:start].decode("utf-8").split(",") if nlen else []
    if len(names) != bands:
        raise FormatError(f"{path}: {len(names)} band names for {bands} bands")
    expected = count * 4
    if len(data) - start < expected:
        raise TruncatedError(f"{path}: payload has {len(data) - start} bytes, expected {expected}")
    if len(data) - start > expected:
        raise FormatError(f"{path}: {len(data) - start - expected} trailing bytes after payload")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
    return Raster(arr.astype(np.float32).reshape(bands, height, width), tuple(names))


# -- band arithmetic ----------------------------------------------------------

def normalize_bands(data, scale: float = DEFAULT_SCALE) -> np.ndarray:
    """``value / scale`` clamped to [0, 1]."""
    if not scale > 0:
        raise ConfigError(f"normalization scale must be positive, got {scale}")
    arr = data.data if isinstance(data, Raster) else np.asarray(data)
    return np.clip(arr.astype(np.float32) / np.float32(scale), 0.0, 1.0)


def ndwi(green, nir) -> np.ndarray:
    """(G - NIR) / (G + NIR), defined as 0 where both are 0."""
    green = np.asarray(green, dtype=np.float32)
    nir = np.asarray(nir, dtype=np.float32)
    if green.shape != nir.shape:
        raise ShapeError(f"green shape {green.shape} does not match NIR shape {nir.shape}")
    total = green + nir
    safe = np.where(total == 0, 1.0, total)
    out = np.where(total == 0, 0.0, (green - nir) / safe)
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def select_bands(raster: Raster, names: Sequence[str], scale: float = DEFAULT_SCALE) -> np.ndarray:
    """Normalized (len(names), h, w) stack; ``NDWI`` is derived from G and NIR."""
    norm = normalize_bands(raster, scale)
    layers = []
    for name in names:
        if name == "NDWI":
            g = norm[raster.band_names.index("G")] if "G" in raster.band_names else None
            n = norm[raster.band_names.index("NIR")] if "NIR" in raster.band_names else None
            if g is None or n is None:
                raise KeyError("NDWI needs G and NIR bands")
            layers.append(ndwi(g, n))
        elif name in raster.band_names:
            layers.append(norm[raster.band_names.index(name)])
        else:
            raise KeyError(f"raster has no band {name!r}; bands are {raster.band_names}")
    return np.stack(layers).astype(np.float32)


# -- patches ------------------------------------------------------------------

def patch_offsets(dim: int, patch: int = PATCH, stride: int = TRAIN_STRIDE) -> list[int]:
    if stride < 1 or patch < 1:
        raise ConfigError(f"patch ({patch}) and stride ({stride}) must be positive")
    if dim < patch:
        raise ShapeError(f"dimension {dim} is smaller than the {patch}-pixel patch")
    return list(range(0, dim - patch + 1, stride))


@dataclass
class PatchSet:
    """Patch windows ``(source, row, col)`` over a list of scenes."""
    entries: list = field(default_factory=list)
    patch: int = PATCH
    stride: int = TRAIN_STRIDE

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def extract_patches(height: int, width: int, patch: int = PATCH, stride: int = TRAIN_STRIDE,
                    source: int = 0) -> PatchSet:
    """Every full patch on the stride grid; no partial or padded edge patches."""
    rows = patch_offsets(height, patch, stride)
    cols = patch_offsets(width, patch, stride)
    return PatchSet([(source, r, c) for r in rows for c in cols], patch, stride)


def filter_patch(label_patch) -> bool:
    """True to keep: discard only when strictly more than half the pixels are nodata."""
    label_patch = np.asarray(label_patch)
    return int(np.count_nonzero(label_patch == NODATA)) * 2 <= label_patch.size


# -- synthetic scenes ---------------------------------------------------------

def _value_noise(rng, height, width, cell):
    """Smooth random field in roughly [0, 1]: bilinear lattice noise plus blur."""
    gh, gw = height // cell + 2, width // cell + 2
    lattice = rng.random((gh, gw))
    field_ = ndimage.zoom(lattice, cell, order=1)[:height, :width]
    return ndimage.gaussian_filter(field_, cell / 4)


def synth_scene(seed: int, width: int = 256, height: int = 256) -> tuple[Raster, Raster]:
    """A 4-band (R, G, B, NIR) scene in [0, 1] and its 0/1/255 label raster.

    Water is a thresholded smooth noise field. NIR separates the classes
    cleanly; the visible bands are made ambiguous by dark land cover whose
    colour overlaps open water.
    """
    if width < PATCH or height < PATCH or width % 2 or height % 2:
        raise ConfigError(f"scene dims must be even and >= {PATCH}, got {width}x{height}")
    rng = np.random.default_rng(seed)
    shape = (height, width)

    water_frac = rng.uniform(0.1, 0.4)
    blobs = _value_noise(rng, height, width, cell=int(rng.integers(24, 48)))
    water = blobs > np.quantile(blobs, 1.0 - water_frac)

    cover = _value_noise(rng, height, width, cell=int(rng.integers(16, 40)))
    dark_land = (cover > np.quantile(cover, 0.6)) & ~water

    nir = np.where(water, rng.normal(0.05, 0.02, shape), rng.normal(0.40, 0.10, shape))

    water_rgb = np.array([0.06, 0.09, 0.11]) + rng.normal(0, 0.01, 3)
    dark_rgb = water_rgb + rng.normal(0, 0.01, 3)
    land_rgb = np.array([0.22, 0.20, 0.14]) + rng.normal(0, 0.02, 3)
    rgb = np.empty((3,) + shape)
    for b in range(3):
        base = np.where(water, water_rgb[b], np.where(dark_land, dark_rgb[b], land_rgb[b]))
        rgb[b] = base + rng.normal(0, 0.03, shape)

    bands = np.concatenate([rgb, nir[None]], axis=0)
    if rng.random() < 0.3:
        haze = _value_noise(rng, height, width, cell=64)
        haze = (haze - haze.min()) / max(float(np.ptp(haze)), 1e-12)
        bands = bands + rng.uniform(0.04, 0.12) * haze[None]
    bands = np.clip(bands, 0.0, 1.0).astype(np.float32)

    label = water.astype(np.float32)
    if rng.random() < 0.1:
        side = int(rng.integers(4))
        extent = height if side < 2 else width
        depth = int(rng.integers(extent // 8, extent // 2 + 1))
        if side == 0:
            label[:depth, :] = NODATA
        elif side == 1:
            label[-depth:, :] = NODATA
        elif side == 2:
            label[:, :depth] = NODATA
        else:
            label[:, -depth:] = NODATA
    return Raster(bands, SYNTH_BANDS), Raster(label[None], ("label",))


# -- scene directories --------------------------------------------------------

def scene_paths(directory, index: int) -> tuple[Path, Path]:
    d = Path(directory)
    return d / f"scene_{index:04d}.mbr", d / f"scene_{index:04d}_label.mbr"


def write_synthetic(directory, count: int, seed: int, width: int = 256, height: int = 256):
    """Write ``count`` scene/label pairs; scene i uses seed ``[seed, i]``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        scene, label = synth_scene(int(np.random.SeedSequence([seed, i]).generate_state(1)[0]),
                                   width, height)
        img_path, lab_path = scene_paths(d, i)
        save_raster(scene, img_path)
        save_raster(label, lab_path)


def list_scenes(directory) -> list[tuple[Path, Path]]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"scene directory {d} does not exist")
    pairs = []
    for img in sorted(d.glob("scene_*.mbr")):
        if img.stem.endswith("_label"):
            continue
        lab = img.with_name(img.stem + "_label.mbr")
        if not lab.exists():
            raise FileNotFoundError(f"missing label raster {lab}")
        pairs.append((img, lab))
    if not pairs:
        raise FileNotFoundError(f"no scene_*.mbr rasters in {d}")
    return pairs


def load_scenes(directory) -> list[tuple[Raster, Raster]]:
    return [(load_raster(i), load_raster(l)) for i, l in list_scenes(directory)]
