import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ustex.augment import (
    AugmentConfig, ColorParams, SpatialParams, color_augment, make_view_set, sample_color, sample_spatial,
    spatial_augment,
)
from ustex.errors import ConfigurationError, InvalidParameterError


def test_spatial_identity_params_leave_image_unchanged(rng):
    img = rng.uniform(-1, 1, size=(24, 24))
    np.testing.assert_array_equal(spatial_augment(img, SpatialParams.identity(24)), img)


def test_horizontal_flip_is_an_involution(rng):
    img = rng.uniform(-1, 1, size=(16, 16))
    flip = SpatialParams(0, 0, 16, 16, flip=True)
    once = spatial_augment(img, flip)
    np.testing.assert_array_equal(once, img[:, ::-1])
    np.testing.assert_array_equal(spatial_augment(once, flip), img)


def test_spatial_rejects_degenerate_crop_and_large_rotation():
    img = np.zeros((16, 16))
    with pytest.raises(InvalidParameterError):
        spatial_augment(img, SpatialParams(0, 0, 0, 16))
    with pytest.raises(InvalidParameterError):
        spatial_augment(img, SpatialParams(0, 0, 16, 16, angle=25.0))


def test_spatial_sampling_is_seed_deterministic():
    cfg = AugmentConfig()
    a = [sample_spatial(np.random.default_rng(5), 64, cfg) for _ in range(3)]
    b = [sample_spatial(np.random.default_rng(5), 64, cfg) for _ in range(3)]
    assert a == b


def test_sampled_params_respect_configured_ranges():
    cfg = AugmentConfig()
    rng = np.random.default_rng(0)
    for _ in range(500):
        s = sample_spatial(rng, 64, cfg)
        assert 0 <= s.top and s.top + s.height <= 64 and 0 <= s.left and s.left + s.width <= 64
        assert abs(s.angle) <= cfg.max_rotation
        # rounding to whole pixels may push the area slightly below the nominal lower bound
        assert 0.55 <= s.height * s.width / 64 ** 2 <= 1.0
        c = sample_color(rng, 64, cfg)
        assert abs(c.brightness) <= 0.2 and 0.8 <= c.contrast <= 1.2 and 0 <= c.sigma <= 1.5


def test_color_identity_params_leave_image_unchanged(rng):
    img = rng.uniform(-1, 1, size=(16, 16))
    np.testing.assert_array_equal(color_augment(img, ColorParams()), img)


def test_brightness_on_constant_zero_image():
    out = color_augment(np.zeros((8, 8)), ColorParams(brightness=0.3))
    np.testing.assert_array_equal(out, np.full((8, 8), 0.3))


def test_contrast_factor_one_is_identity(rng):
    img = rng.uniform(-0.2, 0.9, size=(16, 16))  # mean far from zero
    np.testing.assert_array_equal(color_augment(img, ColorParams(contrast=1.0)), img)


def test_contrast_scales_about_the_mean(rng):
    img = rng.uniform(-0.3, 0.3, size=(16, 16))
    out = color_augment(img, ColorParams(contrast=1.5))
    np.testing.assert_allclose(out, (img - img.mean()) * 1.5 + img.mean(), atol=1e-15)


def test_erase_fills_with_minus_one_then_later_ops_apply():
    out = color_augment(np.zeros((10, 10)), ColorParams(erase=(2, 3, 4, 5)))
    assert np.all(out[2:6, 3:8] == -1.0)
    assert out.sum() == -20.0


def test_erase_outside_image_is_rejected():
    with pytest.raises(InvalidParameterError):
        color_augment(np.zeros((10, 10)), ColorParams(erase=(8, 0, 4, 4)))


def test_blur_preserves_mean_when_no_clamping(rng):
    img = rng.uniform(-0.5, 0.5, size=(64, 64))
    out = color_augment(img, ColorParams(sigma=1.5))
    assert abs(out.mean() - img.mean()) < 1e-3


@pytest.mark.parametrize("value", [-1.0, 0.0, 0.42, 1.0])
def test_blur_preserves_constant_image_exactly(value):
    img = np.full((20, 20), value)
    np.testing.assert_array_equal(color_augment(img, ColorParams(sigma=1.2)), img)


def test_view_set_structure_and_provenance(rng):
    img = rng.uniform(-1, 1, size=(32, 32))
    vs = make_view_set(img, rng)
    assert vs.views.shape == (2, 2, 32, 32) and vs.targets.shape == (2, 32, 32)
    assert len(vs.spatial_params) == 2 and all(len(c) == 2 for c in vs.color_params)
    for s in range(2):
        np.testing.assert_array_equal(vs.targets[s], spatial_augment(img, vs.spatial_params[s]))
        for c in range(2):
            np.testing.assert_array_equal(color_augment(vs.targets[s], vs.color_params[s][c]), vs.views[s, c])


def test_view_set_is_seed_deterministic(rng):
    img = rng.uniform(-1, 1, size=(32, 32))
    a = make_view_set(img, np.random.default_rng(77))
    b = make_view_set(img, np.random.default_rng(77))
    assert np.array_equal(a.views, b.views) and np.array_equal(a.targets, b.targets)
    assert a.spatial_params == b.spatial_params and a.color_params == b.color_params


def test_outputs_stay_in_range_under_extreme_draws():
    extreme = AugmentConfig(crop_area=(0.05, 1.0), crop_aspect=(0.5, 2.0), max_rotation=45.0, rotation_fill=-1.0,
                            erase_prob=1.0, erase_area=(0.2, 0.5), brightness=2.0, contrast=(0.1, 4.0),
                            max_blur_sigma=4.0)
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        img = rng.uniform(-1, 1, size=(16, 16))
        vs = make_view_set(img, rng, extreme)
        assert vs.views.min() >= -1 and vs.views.max() <= 1
        assert vs.targets.min() >= -1 and vs.targets.max() <= 1


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(0.5, 1.5), st.floats(0, 2))
def test_color_augment_range_property(brightness, contrast, sigma):
    img = np.random.default_rng(0).uniform(-1, 1, size=(12, 12))
    out = color_augment(img, ColorParams(brightness=brightness, contrast=contrast, sigma=sigma))
    assert out.shape == img.shape and out.min() >= -1 and out.max() <= 1


@pytest.mark.parametrize("kwargs", [dict(crop_area=(0.0, 1.0)), dict(flip_prob=1.5), dict(contrast=(1.2, 0.8)),
                                    dict(max_blur_sigma=-1.0), dict(erase_area=(0.1, 1.0))])
def test_augment_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        AugmentConfig(**kwargs)
