"""Shared fixtures: small deterministic images and a segmented mini workspace."""

from __future__ import annotations

import numpy as np
import pytest

from cloudspx.raster import MultiBandImage


def make_image(width=24, height=16, seed=0, nir_max=1023):
    rng = np.random.default_rng(seed)
    rgb = rng.integers(0, 256, (height, width, 3), dtype=np.uint8)
    nir = rng.integers(0, nir_max + 1, (height, width)).astype(np.uint16)
    return MultiBandImage(width=width, height=height, rgb=rgb, nir=nir, nir_max=nir_max)


@pytest.fixture
def small_image():
    return make_image()


@pytest.fixture
def two_tone_image():
    """Left half dark, right half bright, sharp vertical step at x=16."""
    h, w = 32, 32
    rng = np.random.default_rng(3)
    rgb = np.full((h, w, 3), 40, dtype=np.int64)
    rgb[:, 16:] = 210
    rgb += rng.integers(-6, 7, (h, w, 3))
    rgb = np.clip(rgb, 0, 255).astype(np.uint8)
    nir = np.full((h, w), 500, dtype=np.uint16)
    return MultiBandImage(width=w, height=h, rgb=rgb, nir=nir)
