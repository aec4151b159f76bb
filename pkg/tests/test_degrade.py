import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shadowspray.degrade import (
    DefocusModel,
    DegradeSpec,
    apply_degradation,
    contrast_and_gradient,
    defocus_psf,
    min_area_rect,
)
from shadowspray.geometry import OrientedBox
from shadowspray.scene import OverlapPolicy, SceneSpec, rasterize, sample_scene


def bundle_for(seed=0, **kw):
    spec = SceneSpec(width=256, height=256, count_range=(10, 15), semi_axis_range=(6, 14), seed=seed, **kw)
    return rasterize(sample_scene(spec))


def test_identity_is_bit_exact():
    b = bundle_for()
    out = apply_degradation(b, DegradeSpec(), seed=1)
    np.testing.assert_array_equal(out.image, b.image)
    np.testing.assert_array_equal(out.instance_map, b.instance_map)
    assert out.annotations == b.annotations


def test_contrast_half_depth():
    img = np.ones((10, 10))
    img[3:7, 3:7] = 0.0
    out = contrast_and_gradient(img, 0.5)
    assert out[0, 0] - out[5, 5] == pytest.approx(0.5)
    assert out.mean() == pytest.approx(img.mean())


def test_contrast_gradient_identity():
    img = np.random.default_rng(0).random((20, 30))
    np.testing.assert_array_equal(contrast_and_gradient(img, 1.0, (0.0, 0.0)), img)


def test_gradient_left_to_right():
    out = contrast_and_gradient(np.full((5, 21), 0.5), 1.0, (0.4, 0.0))
    assert out[:, -1] - out[:, 0] == pytest.approx(np.full(5, 0.4))
    assert out[0, 0] == pytest.approx(0.3)


def test_zero_contrast_is_constant():
    img = np.random.default_rng(1).random((8, 8))
    out = contrast_and_gradient(img, 0.0)
    assert np.allclose(out, img.mean())


def test_defocus_psf_values():
    psf = defocus_psf(10, 0.0, DefocusModel(sigma0=0.5, k=0.02, c_contrast=0.002))
    assert psf.sigma == 0.5 and psf.attenuation == 1.0
    psf = defocus_psf(10, 200.0, DefocusModel(sigma0=0.5, k=0.02, c_contrast=0.002))
    assert psf.sigma == pytest.approx(4.5)
    assert psf.attenuation == pytest.approx(0.6)
    assert psf.kernel.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        defocus_psf(10, 250.0)


def test_defocus_monotone():
    sig = [defocus_psf(5, z).sigma for z in (0, 25, 50, 100, 150, 200)]
    assert all(a < b for a, b in zip(sig, sig[1:]))
    assert defocus_psf(5, -75).sigma == defocus_psf(5, 75).sigma


def test_spec_validation():
    with pytest.raises(ValueError):
        DegradeSpec(contrast_scale=0.0)
    with pytest.raises(ValueError):
        DegradeSpec(blur_sigma=-1)


photometric = st.builds(
    DegradeSpec,
    gaussian_noise_sigma=st.floats(0, 0.2),
    blur_sigma=st.floats(0, 3),
    contrast_scale=st.floats(0.05, 1.0),
    luminosity_gradient=st.tuples(st.floats(-0.5, 0.5), st.floats(0, 2 * math.pi)),
)


@settings(max_examples=30, deadline=None)
@given(photometric, st.integers(0, 2**32))
def test_photometric_never_touches_ground_truth(spec, seed):
    b = bundle_for(seed % 7)
    out = apply_degradation(b, spec, seed)
    np.testing.assert_array_equal(out.instance_map, b.instance_map)
    np.testing.assert_array_equal(out.semantic_mask, b.semantic_mask)
    assert out.annotations == b.annotations
    assert out.image.min() >= 0.0 and out.image.max() <= 1.0


def test_degradation_deterministic():
    b = bundle_for(3)
    spec = DegradeSpec(0.05, 1.0, 0.7, (0.2, 1.0), (20.0, 5.0))
    x, y = apply_degradation(b, spec, 11), apply_degradation(b, spec, 11)
    np.testing.assert_array_equal(x.image, y.image)
    np.testing.assert_array_equal(x.instance_map, y.instance_map)


def test_elastic_preserves_instance_count():
    for seed in range(100):
        spec = SceneSpec(width=192, height=192, count_range=(5, 8), semi_axis_range=(6, 12),
                         overlap=OverlapPolicy.forbid(0.0), min_spacing=8.0, inside=True, seed=seed)
        b = rasterize(sample_scene(spec))
        out = apply_degradation(b, DegradeSpec(elastic=(30.0, 6.0)), seed)
        before = set(np.unique(b.instance_map)) - {0}
        after = set(np.unique(out.instance_map)) - {0}
        assert len(after) == len(before)
        assert len(out.annotations) == len(after)
        assert not np.array_equal(out.instance_map, b.instance_map)


def test_elastic_keeps_image_and_mask_aligned():
    for seed in range(10):
        b = bundle_for(seed, overlap=OverlapPolicy.forbid(0.0))
        out = apply_degradation(b, DegradeSpec(elastic=(40.0, 5.0)), seed)
        bg_median = np.median(out.image[~out.semantic_mask])
        fg = out.image[out.semantic_mask]
        assert np.mean(fg < bg_median) >= 0.95


def test_elastic_boxes_recomputed_from_pixels():
    b = bundle_for(2, overlap=OverlapPolicy.forbid(0.0))
    out = apply_degradation(b, DegradeSpec(elastic=(30.0, 5.0)), 5)
    for k, ann in enumerate(out.annotations, start=1):
        rows, cols = np.nonzero(out.instance_map == k)
        box = ann.box
        c, s = math.cos(box.angle), math.sin(box.angle)
        dx, dy = cols + 0.5 - box.center_x, rows + 0.5 - box.center_y
        u, v = dx * c + dy * s, -dx * s + dy * c
        assert np.all(np.abs(u) <= box.width / 2 + 1e-6)
        assert np.all(np.abs(v) <= box.height / 2 + 1e-6)


def test_min_area_rect_rotated_rectangle():
    truth = OrientedBox(10, 20, 8, 3, 0.6)
    pts = truth.corners()
    # add interior points
    rng = np.random.default_rng(0)
    w = rng.random((50, 4))
    w /= w.sum(1, keepdims=True)
    r = min_area_rect(np.vstack([pts, w @ pts]))
    assert r.area == pytest.approx(truth.area)
    assert (r.center_x, r.center_y) == pytest.approx((10, 20))
    assert {round(r.width, 9), round(r.height, 9)} == {8.0, 3.0}


def test_min_area_rect_axis_aligned_pixels():
    r = min_area_rect(np.array([[0, 0], [4, 0], [4, 2], [0, 2], [2, 1]]))
    assert r.area == pytest.approx(8.0)
