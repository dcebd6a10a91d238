import numpy as np
import pytest

from ssbver.augment import (
    AugmentConfig,
    ViewBundle,
    crop_geometry,
    make_global_views,
    make_local_views,
    make_view_bundle,
    resize,
)
from ssbver.datamodel import ImageSample
from ssbver.errors import ConfigError

from conftest import make_pixels


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


def plain_config(**overrides) -> AugmentConfig:
    """All randomness switched off unless overridden."""
    base = dict(
        global_size=32,
        local_size=32,
        n_local=2,
        global_area_range=(1.0, 1.0),
        local_area_range=(0.5, 0.5),
        flip_prob=0.0,
        jitter_range=(1.0, 1.0),
        hue_range=(0.0, 0.0),
        erase_prob=0.0,
    )
    base.update(overrides)
    return AugmentConfig(**base)


class TestGlobalViews:
    def test_identity_transform(self):
        """Full-area crop with all augmentations off equals the resized source."""
        px = make_pixels(48, 48, seed=1)
        sample = ImageSample(px, identity=0, camera=0)
        views = make_global_views(sample, plain_config(), rng())
        expected = resize(px, 32, 32)
        for v in views:
            assert np.allclose(v, expected, atol=1e-7)

    def test_exactly_two_views(self):
        sample = ImageSample(make_pixels(48, 48, seed=2), identity=0, camera=0)
        assert len(make_global_views(sample, plain_config(), rng())) == 2

    def test_deterministic_given_rng(self):
        sample = ImageSample(make_pixels(64, 64, seed=3), identity=0, camera=0)
        cfg = AugmentConfig(global_size=32, local_size=16, n_local=2)
        a = make_global_views(sample, cfg, rng(5))
        b = make_global_views(sample, cfg, rng(5))
        for va, vb in zip(a, b):
            assert np.array_equal(va, vb)

    def test_erasing_only_in_globals(self):
        """With erase probability 1 a global view contains zeros; a local
        view of an all-ones image never does."""
        px = np.ones((48, 48, 3), dtype=np.float32)
        sample = ImageSample(px, identity=0, camera=0)
        cfg = plain_config(erase_prob=1.0)
        for v in make_global_views(sample, cfg, rng(4)):
            assert (v == 0.0).any()
        for v in make_local_views(sample, cfg, rng(4)):
            assert v.min() > 0.5


class TestLocalViews:
    def test_zero_views(self):
        sample = ImageSample(make_pixels(48, 48), identity=0, camera=0)
        assert make_local_views(sample, plain_config(n_local=0), rng()) == []

    def test_count_and_shape(self):
        sample = ImageSample(make_pixels(64, 64, seed=4), identity=0, camera=0)
        cfg = AugmentConfig(global_size=64, local_size=24, n_local=4)
        views = make_local_views(sample, cfg, rng(1))
        assert len(views) == 4
        assert all(v.shape == (24, 24, 3) for v in views)

    def test_deterministic_given_rng(self):
        sample = ImageSample(make_pixels(64, 64, seed=5), identity=0, camera=0)
        cfg = AugmentConfig(global_size=32, local_size=16, n_local=3)
        a = make_local_views(sample, cfg, rng(9))
        b = make_local_views(sample, cfg, rng(9))
        for va, vb in zip(a, b):
            assert np.array_equal(va, vb)


class TestCropGeometry:
    def test_global_area_ratios_within_stated_range(self):
        """Realized crop area over source area stays in [0.8, 1.0]."""
        g = rng(7)
        ratios = []
        for _ in range(10_000):
            _, _, ch, cw = crop_geometry(128, 128, (0.8, 1.0), None, g)
            ratios.append(ch * cw / (128 * 128))
        ratios = np.array(ratios)
        assert ratios.min() >= 0.8 and ratios.max() <= 1.0

    def test_global_area_ratio_histogram_roughly_uniform(self):
        """Sanity check on the sampler, on a grid fine enough that pixel
        quantization does not lump the histogram."""
        g = rng(7)
        ratios = []
        for _ in range(10_000):
            _, _, ch, cw = crop_geometry(1024, 1024, (0.8, 1.0), None, g)
            ratios.append(ch * cw / (1024 * 1024))
        counts, _ = np.histogram(ratios, bins=10, range=(0.8, 1.0))
        expected = len(ratios) / 10
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        assert chi2 < 100.0

    def test_local_area_ratios_within_stated_range(self):
        g = rng(8)
        ratios = []
        for _ in range(10_000):
            _, _, ch, cw = crop_geometry(96, 128, (0.1, 0.4), (0.75, 4 / 3), g)
            ratios.append(ch * cw / (96 * 128))
        ratios = np.array(ratios)
        assert ratios.min() >= 0.1 and ratios.max() <= 0.4

    def test_full_area_is_whole_image(self):
        top, left, ch, cw = crop_geometry(48, 64, (1.0, 1.0), None, rng())
        assert (top, left, ch, cw) == (0, 0, 48, 64)

    def test_small_images_stay_in_range(self):
        g = rng(9)
        for _ in range(2_000):
            _, _, ch, cw = crop_geometry(32, 32, (0.1, 0.4), (0.75, 4 / 3), g)
            assert 0.1 <= ch * cw / (32 * 32) <= 0.4


class TestBundle:
    def test_labels_preserved_via_source(self):
        sample = ImageSample(make_pixels(48, 48, seed=6), identity=13, camera=2)
        bundle = make_view_bundle(sample, plain_config(), rng())
        assert bundle.source is sample
        assert bundle.identity == 13
        assert bundle.n_local == 2

    def test_bundle_requires_two_globals(self):
        sample = ImageSample(make_pixels(48, 48), identity=0, camera=0)
        with pytest.raises(ConfigError):
            ViewBundle(globals=(sample.pixels,), locals=(), source=sample)


class TestConfigValidation:
    def test_local_max_above_global_min(self):
        cfg = AugmentConfig(global_area_range=(0.3, 1.0), local_area_range=(0.1, 0.5))
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_negative_local_count(self):
        with pytest.raises(ConfigError):
            AugmentConfig(n_local=-1).validate()

    def test_bad_area_range(self):
        with pytest.raises(ConfigError):
            AugmentConfig(global_area_range=(0.0, 1.0)).validate()

    def test_validation_runs_in_view_makers(self):
        sample = ImageSample(make_pixels(48, 48), identity=0, camera=0)
        cfg = AugmentConfig(flip_prob=1.5)
        with pytest.raises(ConfigError):
            make_global_views(sample, cfg, rng())
