"""Super-pixel cloud detection for RGB+NIR imagery.

Tiles are over-segmented into boundary-aware super-pixels, each region is
classified by a small fusion CNN and a cascaded forest ensemble, and the
combined predictions are refined with NIR and neighborhood rules into a
binary cloud mask.
"""

__version__ = "0.1.0"

from .patchset import ClassLabel
from .raster import MultiBandImage, Tile, load_image, save_image

__all__ = [
    "ClassLabel",
    "MultiBandImage",
    "Tile",
    "load_image",
    "save_image",
    "__version__",
]
