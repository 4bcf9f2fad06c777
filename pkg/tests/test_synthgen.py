"""Synthetic tile generator: determinism, class structure, NIR separation."""

from __future__ import annotations

import numpy as np
import pytest

from cloudspx import synthgen
from cloudspx.patchset import ClassLabel
from cloudspx.raster import load_image
from cloudspx.synthgen import SceneParams


def test_deterministic_in_seed():
    img_a, gt_a, scene_a = synthgen.generate_tile(SceneParams(seed=5, tile_size=128))
    img_b, gt_b, scene_b = synthgen.generate_tile(SceneParams(seed=5, tile_size=128))
    np.testing.assert_array_equal(img_a.rgb, img_b.rgb)
    np.testing.assert_array_equal(img_a.nir, img_b.nir)
    np.testing.assert_array_equal(gt_a.classes, gt_b.classes)
    assert scene_a == scene_b


def test_different_seeds_differ():
    img_a, _, _ = synthgen.generate_tile(SceneParams(seed=1, tile_size=128))
    img_b, _, _ = synthgen.generate_tile(SceneParams(seed=2, tile_size=128))
    assert (img_a.rgb != img_b.rgb).any()


def test_all_classes_present_and_nir_layers_separate():
    img, gt, _ = synthgen.generate_tile(SceneParams(seed=0, tile_size=192))
    classes = gt.classes
    for label in ClassLabel:
        assert (classes == int(label)).any(), f"missing {label.name}"

    nir = img.nir.astype(np.float64)
    thick_mean = nir[classes == int(ClassLabel.THICK_CLOUD)].mean()
    cirrus_mean = nir[classes == int(ClassLabel.CIRRUS_CLOUD)].mean()
    building_mean = nir[classes == int(ClassLabel.BUILDING)].mean()
    # thick cloud is NIR-bright, cirrus intermediate, buildings dark
    assert thick_mean > 1000
    assert 600 < cirrus_mean < 1000
    assert building_mean < 600


def test_thick_cloud_is_rgb_bright():
    img, gt, _ = synthgen.generate_tile(SceneParams(seed=4, tile_size=160))
    lum = img.rgb.astype(np.float64).mean(axis=2)
    thick = gt.classes == int(ClassLabel.THICK_CLOUD)
    other = gt.classes == int(ClassLabel.OTHER_CULTURE)
    assert lum[thick].mean() > lum[other].mean() + 60


def test_fraction_sums_to_one():
    _, gt, _ = synthgen.generate_tile(SceneParams(seed=7, tile_size=128))
    total = sum(gt.fraction(label) for label in ClassLabel)
    assert total == pytest.approx(1.0)


def test_small_tiles_still_place_content():
    # footprints shrink until they fit instead of failing
    params = SceneParams(seed=9, tile_size=96, n_thick_blobs=2, n_cirrus_halos=2,
                         n_buildings=4)
    _, gt, _ = synthgen.generate_tile(params)
    assert (gt.classes == int(ClassLabel.THICK_CLOUD)).any()
    assert (gt.classes == int(ClassLabel.BUILDING)).any()


def test_overcrowded_tile_raises():
    params = SceneParams(seed=0, tile_size=96, n_thick_blobs=6, n_buildings=40)
    with pytest.raises(synthgen.GenerationError):
        synthgen.generate_tile(params)


def test_write_tile_round_trip(tmp_path):
    img, gt, scene = synthgen.generate_tile(SceneParams(seed=2, tile_size=96))
    synthgen.write_tile(tmp_path / "t0", img, gt, scene)
    loaded = load_image(tmp_path / "t0")
    np.testing.assert_array_equal(loaded.rgb, img.rgb)
    np.testing.assert_array_equal(loaded.nir, img.nir)
    gt_back = synthgen.load_ground_truth(tmp_path / "t0")
    np.testing.assert_array_equal(gt_back.classes, gt.classes)
    assert (tmp_path / "t0" / "scene.json").is_file()
