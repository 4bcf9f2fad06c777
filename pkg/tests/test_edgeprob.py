"""Edge probability maps against scipy reference filters."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from cloudspx import edgeprob
from cloudspx.edgeprob import EdgeMap, EdgeMapError

from conftest import make_image


def random_field(h, w, seed):
    return np.random.default_rng(seed).uniform(0, 255, (h, w))


@pytest.mark.parametrize("seed", range(4))
def test_correlate3_matches_scipy(seed):
    a = random_field(11, 13, seed)
    for kernel in (edgeprob.SCHARR_X, edgeprob.SCHARR_Y):
        got = edgeprob._correlate3(a, kernel)
        ref = ndimage.correlate(a, kernel, mode="nearest")
        np.testing.assert_allclose(got, ref, atol=1e-9)


@pytest.mark.parametrize("size", [1, 2, 3, 4, 5])
def test_box_blur_matches_scipy(size):
    a = random_field(10, 9, size)
    got = edgeprob._box_blur(a, size)
    ref = ndimage.uniform_filter(a, size=size, mode="nearest")
    np.testing.assert_allclose(got, ref, atol=1e-9)


def test_multiscale_is_max_over_scales():
    lum = random_field(16, 16, 7)
    per_scale = []
    for s in edgeprob.EDGE_SCALES:
        sm = edgeprob._box_blur(lum, s)
        gx = edgeprob._correlate3(sm, edgeprob.SCHARR_X)
        gy = edgeprob._correlate3(sm, edgeprob.SCHARR_Y)
        per_scale.append(np.hypot(gx, gy))
    stacked = np.maximum.reduce(per_scale)
    expect = stacked / stacked.max()
    np.testing.assert_allclose(edgeprob.gradient_multiscale(lum), expect, atol=1e-12)


def test_multiscale_flat_image_is_zero_not_nan():
    out = edgeprob.gradient_multiscale(np.full((8, 8), 42.0))
    assert np.all(out == 0.0)


def test_edge_probability_peaks_on_step(two_tone_image):
    em = edgeprob.edge_probability(two_tone_image)
    assert em.prob.shape == (32, 32)
    # strongest response within a pixel of the step, weak far away
    assert em.prob[:, 15:18].max() == pytest.approx(1.0)
    assert em.prob[:, 4:10].max() < 0.5


@settings(max_examples=15, deadline=None)
@given(w=st.integers(4, 16), h=st.integers(4, 16), seed=st.integers(0, 300))
def test_probabilities_stay_in_unit_interval(w, h, seed):
    img = make_image(width=w, height=h, seed=seed)
    em = edgeprob.edge_probability(img)
    assert em.prob.min() >= 0.0
    assert em.prob.max() <= 1.0


def test_external_map_array_passthrough(small_image):
    prob = np.random.default_rng(0).uniform(0, 1, (small_image.height, small_image.width))
    em = edgeprob.edge_probability(small_image, detector="external", external_map=prob)
    np.testing.assert_allclose(em.prob, prob)


def test_external_map_clipped_to_unit_interval(small_image):
    prob = np.full((small_image.height, small_image.width), 3.5)
    em = edgeprob.edge_probability(small_image, detector="external", external_map=prob)
    assert em.prob.max() == 1.0


def test_external_map_file_round_trip(tmp_path, small_image):
    prob = np.random.default_rng(1).uniform(0, 1, (small_image.height, small_image.width))
    em = EdgeMap(width=small_image.width, height=small_image.height, prob=prob)
    edgeprob.save_edge_map(em, tmp_path / "e.png")
    back = edgeprob.edge_probability(
        small_image, detector="external", external_map=tmp_path / "e.png"
    )
    # 16-bit quantization
    assert np.abs(back.prob - prob).max() <= 0.5 / edgeprob.EXTERNAL_SCALE + 1e-12


def test_external_requires_map(small_image):
    with pytest.raises(EdgeMapError):
        edgeprob.edge_probability(small_image, detector="external")


def test_external_shape_mismatch_raises(small_image):
    with pytest.raises(EdgeMapError):
        edgeprob.edge_probability(
            small_image, detector="external", external_map=np.zeros((4, 4))
        )


def test_unknown_detector_raises(small_image):
    with pytest.raises(EdgeMapError):
        edgeprob.edge_probability(small_image, detector="sobel")


def test_edge_map_shape_validation():
    with pytest.raises(EdgeMapError):
        EdgeMap(width=4, height=4, prob=np.zeros((3, 4)))
