"""Synthetic 4-band scenes with per-pixel ground truth.

Scenes mimic the qualitative structure the pipeline relies on: thick clouds
are bright, smooth and high-NIR; cirrus halos ring them with intermediate
brightness and NIR deliberately below the 1000 DN threshold; buildings are
bright but textured with low NIR; terrain is dark low-frequency background.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .patchset import ClassLabel
from .raster import DEFAULT_NIR_MAX, MultiBandImage, save_image

DEFAULT_NIR_LEVELS = {
    "thick": (1000, 1023),
    "cirrus": (700, 999),
    "building": (200, 500),
    "terrain": (100, 400),
}

DEFAULT_TEXTURE = {"thick": 4.0, "cirrus": 10.0, "building": 45.0, "terrain": 14.0}

_PLACEMENT_ATTEMPTS = 200


class GenerationError(Exception):
    pass


@dataclass(frozen=True)
class SceneParams:
    seed: int = 0
    tile_size: int = 500
    n_thick_blobs: int = 3
    n_cirrus_halos: int = 3
    n_buildings: int = 8
    nir_levels: dict = field(default_factory=lambda: dict(DEFAULT_NIR_LEVELS))
    texture: dict = field(default_factory=lambda: dict(DEFAULT_TEXTURE))
    nir_max: int = DEFAULT_NIR_MAX


@dataclass(frozen=True)
class GroundTruth:
    classes: np.ndarray  # (tile, tile) uint8 of ClassLabel values

    def fraction(self, label: ClassLabel) -> float:
        return float(np.mean(self.classes == int(label)))


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    """Bilinearly interpolated unit-variance noise with feature size `cell`."""
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.normal(size=(gh, gw))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x0 + 1)]
    c = grid[np.ix_(y0 + 1, x0)]
    d = grid[np.ix_(y0 + 1, x0 + 1)]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _place(rng, occupied: np.ndarray, margin: int, core_half: int):
    """Random center at least `margin` from the border whose `core_half`
    square avoids `occupied`. Returns None when no site is found."""
    size = occupied.shape[0]
    lo, hi = margin, size - margin
    if hi <= lo:
        return None
    for _ in range(_PLACEMENT_ATTEMPTS):
        cy = int(rng.integers(lo, hi))
        cx = int(rng.integers(lo, hi))
        y0, y1 = max(0, cy - core_half), min(size, cy + core_half)
        x0, x1 = max(0, cx - core_half), min(size, cx + core_half)
        if not occupied[y0:y1, x0:x1].any():
            return cy, cx
    return None


def generate_tile(params: SceneParams) -> tuple[MultiBandImage, GroundTruth, dict]:
    """Render one tile. Returns (image, ground truth, scene description).

    Deterministic in params.seed. Layer precedence when footprints overlap:
    thick > cirrus > building > terrain, for both pixels and labels.
    """
    rng = np.random.default_rng(params.seed)
    size = params.tile_size
    levels = params.nir_levels
    texture = params.texture
    scene: dict = {"seed": params.seed, "tile_size": size, "thick_blobs": [], "buildings": []}

    rgb = np.zeros((size, size, 3), dtype=np.float64)
    nir = np.zeros((size, size), dtype=np.float64)
    gt = np.full((size, size), int(ClassLabel.OTHER_CULTURE), dtype=np.uint8)

    # terrain background
    low = _smooth_noise(rng, size, size, max(8, size // 16))
    base = rng.uniform(45, 95, size=3)
    for c in range(3):
        rgb[:, :, c] = base[c] + 18.0 * low + rng.normal(0, texture["terrain"] / 4, (size, size))
    t_lo, t_hi = levels["terrain"]
    t_mid = rng.uniform(t_lo + 50, t_hi - 50)
    nir[:] = np.clip(t_mid + 60.0 * _smooth_noise(rng, size, size, max(8, size // 16)), t_lo, t_hi)

    occupied = np.zeros((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size]

    # thick blobs (disk unions) with optional cirrus halo rings
    n_halos = min(params.n_cirrus_halos, params.n_thick_blobs)
    for b in range(params.n_thick_blobs):
        radius = rng.uniform(0.06, 0.13) * size
        halo_w = rng.uniform(0.025, 0.045) * size + 4 if b < n_halos else 0.0
        site = None
        while radius >= 4.0:
            # halos and blob fringes may run off-tile; only the core must be free
            site = _place(rng, occupied, margin=max(4, int(radius * 0.8)),
                          core_half=max(3, int(radius)))
            if site is not None:
                break
            radius *= 0.8
            halo_w *= 0.85
        if site is None:
            raise GenerationError("tile too crowded for another thick blob; "
                                  "reduce counts or enlarge the tile")
        cy, cx = site

        blob = np.zeros((size, size), dtype=bool)
        n_disks = int(rng.integers(3, 7))
        disks = []
        for _ in range(n_disks):
            dy, dx = rng.normal(0, radius * 0.45, size=2)
            r = rng.uniform(0.5 * radius, radius)
            disks.append((cy + dy, cx + dx, r))
            blob |= (yy - (cy + dy)) ** 2 + (xx - (cx + dx)) ** 2 <= r * r
        scene["thick_blobs"].append(
            {"cy": cy, "cx": cx, "radius": radius, "halo_width": halo_w,
             "disks": [[float(a), float(b_), float(r)] for a, b_, r in disks]}
        )

        if halo_w > 0:
            dist = ndimage.distance_transform_edt(~blob)
            ring = (dist > 0) & (dist <= halo_w)
            ring &= gt != int(ClassLabel.THICK_CLOUD)  # earlier blobs keep precedence
            alpha = 0.78 - 0.43 * (dist / halo_w)
            alpha = alpha + rng.normal(0, texture["cirrus"] / 255.0, (size, size))
            alpha = np.clip(alpha, 0.25, 0.9)
            for c in range(3):
                rgb[:, :, c][ring] = alpha[ring] * 246.0 + (1 - alpha[ring]) * rgb[:, :, c][ring]
            c_lo, c_hi = levels["cirrus"]
            nir[ring] = rng.integers(max(c_lo, 750), c_hi - 18, size=int(ring.sum()))
            gt[ring] = int(ClassLabel.CIRRUS_CLOUD)
            occupied |= dist <= halo_w + 3

        shade = 248.0 + 5.0 * _smooth_noise(rng, size, size, max(6, size // 24))
        for c in range(3):
            rgb[:, :, c][blob] = np.clip(shade[blob] + rng.normal(0, texture["thick"],
                                                                  int(blob.sum())), 235, 255)
        k_lo, k_hi = levels["thick"]
        nir[blob] = rng.integers(k_lo + 4, k_hi + 1, size=int(blob.sum()))
        gt[blob] = int(ClassLabel.THICK_CLOUD)
        occupied |= blob

    # buildings: bright rectangles with periodic stripes, low NIR
    for _ in range(params.n_buildings):
        bh = int(rng.integers(12, 41))
        bw = int(rng.integers(12, 41))
        while True:
            half = max(bh, bw) // 2 + 3
            site = _place(rng, occupied, margin=half, core_half=half)
            if site is not None:
                break
            if max(bh, bw) <= 8:
                raise GenerationError("tile too crowded for another building; "
                                      "reduce counts or enlarge the tile")
            bh = max(8, int(bh * 0.75))
            bw = max(8, int(bw * 0.75))
        cy, cx = site
        y0, x0 = cy - bh // 2, cx - bw // 2
        y1, x1 = y0 + bh, x0 + bw
        bright = rng.uniform(185, 235)
        block = np.full((bh, bw), bright)
        period = int(rng.integers(3, 6))
        axis = int(rng.integers(0, 2))
        idx = (np.arange(bh)[:, None] if axis == 0 else np.arange(bw)[None, :])
        stripes = (idx % period) == 0
        block = block - texture["building"] * stripes
        block = block + rng.normal(0, 3.0, (bh, bw))
        for c in range(3):
            rgb[y0:y1, x0:x1, c] = block + rng.uniform(-6, 6)
        b_lo, b_hi = levels["building"]
        nir[y0:y1, x0:x1] = rng.integers(b_lo, b_hi + 1) + rng.normal(0, 12.0, (bh, bw))
        gt[y0:y1, x0:x1] = int(ClassLabel.BUILDING)
        occupied[y0:y1, x0:x1] = True
        scene["buildings"].append({"cy": cy, "cx": cx, "h": bh, "w": bw, "period": period})

    img = MultiBandImage(
        width=size,
        height=size,
        rgb=np.clip(np.round(rgb), 0, 255).astype(np.uint8),
        nir=np.clip(np.round(nir), 0, params.nir_max).astype(np.uint16),
        nir_max=params.nir_max,
    )
    return img, GroundTruth(classes=gt), scene


def write_tile(out_dir: str | Path, img: MultiBandImage, gt: GroundTruth, scene: dict) -> None:
    """Persist the container plus gt.png (class ids) and scene.json."""
    out_dir = Path(out_dir)
    save_image(img, out_dir)
    Image.fromarray(gt.classes).save(out_dir / "gt.png")
    (out_dir / "scene.json").write_text(json.dumps(scene, indent=2) + "\n")


def load_ground_truth(tile_dir: str | Path) -> GroundTruth:
    arr = np.asarray(Image.open(Path(tile_dir) / "gt.png"), dtype=np.uint8)
    return GroundTruth(classes=arr)
