"""4-band raster tiles: container IO, grid cropping, band statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

DEFAULT_NIR_MAX = 1023
DEFAULT_TILE_SIZE = 500

META_NAME = "meta.json"
RGB_NAME = "rgb.png"
NIR_NAME = "nir.png"
BAND_ORDER = ["R", "G", "B", "NIR"]


class RasterError(Exception):
    """Base class for raster container failures."""


class MissingFileError(RasterError):
    """Container directory or one of its files is absent."""


class DimensionMismatchError(RasterError):
    """Band buffers do not share one pixel grid."""


class MetadataError(RasterError):
    """meta.json is unreadable or inconsistent."""


class Band(Enum):
    R = "R"
    G = "G"
    B = "B"
    NIR = "NIR"


@dataclass(frozen=True)
class MultiBandImage:
    """RGB (8-bit) plus NIR (integer DN) raster on a common pixel grid.

    Immutable after construction; safe to share across readers.
    """

    width: int
    height: int
    rgb: np.ndarray  # (height, width, 3) uint8
    nir: np.ndarray  # (height, width) uint16, every value <= nir_max
    nir_max: int = DEFAULT_NIR_MAX

    def __post_init__(self):
        if self.rgb.shape != (self.height, self.width, 3):
            raise DimensionMismatchError(
                f"rgb shape {self.rgb.shape} != expected {(self.height, self.width, 3)}"
            )
        if self.nir.shape != (self.height, self.width):
            raise DimensionMismatchError(
                f"nir shape {self.nir.shape} != expected {(self.height, self.width)}"
            )
        if self.nir.size and int(self.nir.max()) > self.nir_max:
            raise ValueError(f"NIR sample {int(self.nir.max())} exceeds nir_max {self.nir_max}")


@dataclass(frozen=True)
class Tile:
    source_id: str
    offset_x: int
    offset_y: int
    image: MultiBandImage


@dataclass(frozen=True)
class BandStats:
    band: Band
    mean: float
    min: int
    max: int


def save_image(img: MultiBandImage, path: str | Path) -> None:
    """Write a container directory (meta.json + rgb.png + nir.png)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "width": img.width,
        "height": img.height,
        "nir_max": img.nir_max,
        "bands": BAND_ORDER,
    }
    (path / META_NAME).write_text(json.dumps(meta, indent=2) + "\n")
    Image.fromarray(img.rgb, mode="RGB").save(path / RGB_NAME)
    Image.fromarray(img.nir.astype(np.uint16)).save(path / NIR_NAME)


def load_image(path: str | Path) -> MultiBandImage:
    """Load a container directory into a MultiBandImage.

    NIR values are clamped to [0, nir_max]. Raises MissingFileError,
    MetadataError or DimensionMismatchError on the corresponding defect.
    """
    path = Path(path)
    if not path.is_dir():
        raise MissingFileError(f"container directory not found: {path}")
    for name in (META_NAME, RGB_NAME, NIR_NAME):
        if not (path / name).is_file():
            raise MissingFileError(f"container file missing: {path / name}")

    try:
        meta = json.loads((path / META_NAME).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MetadataError(f"unreadable meta.json in {path}: {exc}") from exc
    for key in ("width", "height", "nir_max", "bands"):
        if key not in meta:
            raise MetadataError(f"meta.json missing key {key!r} in {path}")
    if meta["bands"] != BAND_ORDER:
        raise MetadataError(f"unexpected band list {meta['bands']!r} in {path}")
    width, height, nir_max = int(meta["width"]), int(meta["height"]), int(meta["nir_max"])
    if width <= 0 or height <= 0 or nir_max <= 0:
        raise MetadataError(f"non-positive dimensions in meta.json of {path}")

    rgb = np.asarray(Image.open(path / RGB_NAME).convert("RGB"), dtype=np.uint8)
    nir = np.asarray(Image.open(path / NIR_NAME), dtype=np.int64)
    if rgb.shape != (height, width, 3):
        raise DimensionMismatchError(
            f"rgb.png is {rgb.shape[1]}x{rgb.shape[0]}, meta says {width}x{height}"
        )
    if nir.shape != (height, width):
        raise DimensionMismatchError(
            f"nir.png is {nir.shape[1]}x{nir.shape[0]}, meta says {width}x{height}"
        )
    nir = np.clip(nir, 0, nir_max).astype(np.uint16)
    return MultiBandImage(width=width, height=height, rgb=rgb, nir=nir, nir_max=nir_max)


def crop_tiles(
    img: MultiBandImage, tile_size: int = DEFAULT_TILE_SIZE, source_id: str = ""
) -> list[Tile]:
    """Cut the image into a row-major grid of tile_size squares.

    Trailing strips narrower than tile_size are discarded, never padded.
    """
    if tile_size < 32:
        raise ValueError(f"tile_size must be >= 32, got {tile_size}")
    tiles = []
    for ty in range(img.height // tile_size):
        for tx in range(img.width // tile_size):
            y0, x0 = ty * tile_size, tx * tile_size
            sub = MultiBandImage(
                width=tile_size,
                height=tile_size,
                rgb=img.rgb[y0 : y0 + tile_size, x0 : x0 + tile_size].copy(),
                nir=img.nir[y0 : y0 + tile_size, x0 : x0 + tile_size].copy(),
                nir_max=img.nir_max,
            )
            tiles.append(Tile(source_id=source_id, offset_x=x0, offset_y=y0, image=sub))
    return tiles


def band_stats(img: MultiBandImage, band: Band) -> BandStats:
    """Exact mean/min/max over every sample of one band."""
    if band is Band.NIR:
        data = img.nir
    else:
        data = img.rgb[:, :, {"R": 0, "G": 1, "B": 2}[band.value]]
    return BandStats(
        band=band,
        mean=float(np.mean(data, dtype=np.float64)),
        min=int(data.min()),
        max=int(data.max()),
    )
