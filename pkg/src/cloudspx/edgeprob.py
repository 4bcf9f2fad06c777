"""Per-pixel edge probability maps for boundary-snapped segmentation.

The default detector is a multi-scale Scharr gradient on luminance; a
precomputed external map (16-bit grayscale PNG) can be injected instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .raster import MultiBandImage

SCHARR_X = np.array([[-3, 0, 3], [-10, 0, 10], [-3, 0, 3]], dtype=np.float64)
SCHARR_Y = SCHARR_X.T

EDGE_SCALES = (1, 2, 4)
_FLAT_EPS = 1e-12  # guards normalization of an all-zero gradient map

EXTERNAL_SCALE = 65535  # PNG value mapping to probability 1.0


class EdgeMapError(Exception):
    pass


@dataclass(frozen=True)
class EdgeMap:
    width: int
    height: int
    prob: np.ndarray  # (height, width) float64 in [0, 1]

    def __post_init__(self):
        if self.prob.shape != (self.height, self.width):
            raise EdgeMapError(f"probability raster {self.prob.shape} does not match "
                               f"{self.width}x{self.height}")


def _replicate_pad(a: np.ndarray, r: int) -> np.ndarray:
    return np.pad(a, r, mode="edge")


def _correlate3(a: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 correlation with edge-replicated borders."""
    p = _replicate_pad(a, 1)
    h, w = a.shape
    out = np.zeros_like(a)
    for di in range(3):
        for dj in range(3):
            out += kernel[di, dj] * p[di : di + h, dj : dj + w]
    return out


def _box_blur(a: np.ndarray, size: int) -> np.ndarray:
    """size x size box mean with edge replication; size=1 is identity."""
    if size == 1:
        return a
    r = size // 2
    p = _replicate_pad(a, r)
    h, w = a.shape
    acc = np.zeros_like(a)
    # even sizes use the window [i-r, i-r+size), a half-pixel-left bias
    for di in range(size):
        for dj in range(size):
            acc += p[di : di + h, dj : dj + w]
    return acc / (size * size)


def gradient_multiscale(luminance: np.ndarray, scales=EDGE_SCALES) -> np.ndarray:
    """Max over scales of Scharr gradient magnitude, normalized to [0, 1]."""
    best = np.zeros_like(luminance)
    for s in scales:
        smooth = _box_blur(luminance, s)
        gx = _correlate3(smooth, SCHARR_X)
        gy = _correlate3(smooth, SCHARR_Y)
        np.maximum(best, np.hypot(gx, gy), out=best)
    return best / max(_FLAT_EPS, float(best.max()))


def load_external_map(path: str | Path) -> np.ndarray:
    raw = np.asarray(Image.open(path), dtype=np.float64)
    return raw / EXTERNAL_SCALE


def save_edge_map(edges: EdgeMap, path: str | Path) -> None:
    scaled = np.round(edges.prob * EXTERNAL_SCALE).astype(np.uint16)
    Image.fromarray(scaled).save(path)


def edge_probability(
    img: MultiBandImage,
    detector: str = "gradient_multiscale",
    external_map: np.ndarray | str | Path | None = None,
) -> EdgeMap:
    """Compute the edge-probability map the segmenter snaps to.

    detector "gradient_multiscale" runs the built-in operator on luminance
    (R+G+B)/3; "external" wraps a supplied [0,1] raster of matching size.
    """
    if detector == "external":
        if external_map is None:
            raise EdgeMapError("external detector requires a precomputed map")
        prob = load_external_map(external_map) if isinstance(external_map, (str, Path)) \
            else np.asarray(external_map, dtype=np.float64)
        if prob.shape != (img.height, img.width):
            raise EdgeMapError(
                f"external map {prob.shape} does not match image "
                f"{img.height}x{img.width}"
            )
        prob = np.clip(prob, 0.0, 1.0)
    elif detector == "gradient_multiscale":
        lum = img.rgb.astype(np.float64).sum(axis=2) / 3.0
        prob = gradient_multiscale(lum)
    else:
        raise EdgeMapError(f"unknown detector {detector!r}")
    return EdgeMap(width=img.width, height=img.height, prob=prob)
