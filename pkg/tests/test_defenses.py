import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustscore.defenses import (
    POOL,
    DefenseConfig,
    TransformSpec,
    apply_barrage,
    apply_defense,
    apply_transform,
    derive_seed,
    identity_defense,
    rgb_to_ycbcr,
    sample_barrage,
    y_median_denoise,
)
from robustscore.errors import EmptyPool
from robustscore.imageio import Image

from conftest import random_image

ALL_SPECS = [
    TransformSpec("bit_depth", {"bits": 3}),
    TransformSpec("median_blur", {"window": 5}),
    TransformSpec("gaussian_blur", {"sigma": 1.3}),
    TransformSpec("additive_noise", {"sigma": 0.03, "noise_seed": 9}),
    TransformSpec("block_dct", {"quality": 25}),
]


class TestTransforms:
    def test_one_bit_rounds_up(self):
        out = apply_transform(Image(np.array([[0.6]])), TransformSpec("bit_depth", {"bits": 1}))
        assert out.flat()[0] == 1.0

    def test_bit_depth_levels(self):
        out = apply_transform(Image(np.array([[0.2, 0.5, 0.9]])), TransformSpec("bit_depth", {"bits": 2}))
        assert out.flat().tolist() == [1 / 3, 2 / 3, 1.0]

    @pytest.mark.parametrize(
        "kind, params",
        [("bit_depth", {"bits": 0}), ("bit_depth", {"bits": 8}), ("median_blur", {"window": 4}),
         ("gaussian_blur", {"sigma": 2.5}), ("additive_noise", {"sigma": 0.1, "noise_seed": 0}),
         ("block_dct", {"quality": 95}), ("sharpen", {})],
    )
    def test_ranges_enforced(self, kind, params):
        with pytest.raises(ValueError):
            TransformSpec(kind, params)

    @pytest.mark.parametrize("spec", ALL_SPECS[1:3] + ALL_SPECS[4:], ids=lambda s: s.kind)
    def test_constant_images_stay_constant(self, spec):
        img = Image(np.full((16, 16, 1), 0.37))
        once = apply_transform(img, spec)
        twice = apply_transform(once, spec)
        np.testing.assert_allclose(once.pixels, 0.37, rtol=0, atol=1e-9)
        assert np.max(np.abs(twice.pixels - 0.37)) <= np.max(np.abs(once.pixels - 0.37)) + 1e-15

    @pytest.mark.parametrize("value", [0.0, 0.2, 0.5, 1.0])
    def test_dct_keeps_aligned_constant(self, value):
        img = Image(np.full((16, 24, 3), value))
        out = apply_transform(img, TransformSpec("block_dct", {"quality": 10}))
        np.testing.assert_allclose(out.pixels, value, rtol=0, atol=1e-9)

    def test_dct_unaligned_shape_preserved(self, rng):
        img = random_image(rng, 13, 9, 3)
        assert apply_transform(img, TransformSpec("block_dct", {"quality": 50})).shape == img.shape

    def test_gaussian_kernel_radius(self):
        # an impulse spreads to exactly ceil(3 sigma) pixels each side
        img = np.zeros((1, 21, 1))
        img[0, 10, 0] = 1.0
        out = apply_transform(Image(img), TransformSpec("gaussian_blur", {"sigma": 1.0})).flat()
        assert np.count_nonzero(out) == 7
        assert out.sum() == pytest.approx(1.0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.integers(0, 4), st.sampled_from([1, 3]))
    def test_range_and_shape(self, seed, which, channels):
        rng = np.random.default_rng(seed)
        img = random_image(rng, 10, 11, channels)
        out = apply_transform(img, ALL_SPECS[which])
        assert out.shape == img.shape
        assert np.all((out.pixels >= 0) & (out.pixels <= 1))


class TestBarrage:
    def test_same_seed_bit_identical(self, rng):
        img = random_image(rng, 12, 12, 3)
        cfg = DefenseConfig(seed=42)
        assert apply_barrage(img, cfg) == apply_barrage(img, cfg)

    def test_empty_pool(self, rng):
        with pytest.raises(EmptyPool):
            apply_barrage(random_image(rng), DefenseConfig(max_transforms=0))

    def test_too_many(self):
        with pytest.raises(ValueError):
            sample_barrage(DefenseConfig(max_transforms=6))

    def test_sampling_rules(self):
        seen_counts = set()
        for seed in range(200):
            specs = sample_barrage(DefenseConfig(seed=seed, max_transforms=3))
            kinds = [s.kind for s in specs]
            assert 1 <= len(kinds) <= 3
            assert len(set(kinds)) == len(kinds)
            assert set(kinds) <= set(POOL)
            seen_counts.add(len(kinds))
        assert seen_counts == {1, 2, 3}

    def test_single_transform_cap(self, rng):
        img = random_image(rng, 8, 8)
        cfg = DefenseConfig(seed=5, max_transforms=1)
        (spec,) = sample_barrage(cfg)
        assert apply_barrage(img, cfg) == apply_transform(img, spec)

    def test_per_image_seed(self):
        assert derive_seed(7, 0) == 7
        assert derive_seed(7, 3) == 4
        assert DefenseConfig(seed=7).for_image(3).seed == 4

    def test_report_records_pool(self):
        d = DefenseConfig(seed=3).to_dict()
        assert d["pool"] == list(POOL)
        assert d["seed"] == 3


class TestYMedian:
    def test_constant_unchanged(self):
        img = Image(np.full((5, 5, 3), 0.4))
        np.testing.assert_allclose(y_median_denoise(img).pixels, 0.4, rtol=0, atol=1e-12)

    def test_salt_pixel_removed(self):
        px = np.zeros((5, 5, 1))
        px[2, 2, 0] = 1.0
        assert y_median_denoise(Image(px), 3).flat().max() == 0.0

    def test_chroma_preserved(self, rng):
        img = random_image(rng, 9, 9, 3, lo=0.35, hi=0.65)
        out = y_median_denoise(img, 5)
        a = rgb_to_ycbcr(img.pixels)
        b = rgb_to_ycbcr(out.pixels)
        np.testing.assert_allclose(b[:, :, 1:], a[:, :, 1:], rtol=0, atol=1e-9)
        assert not np.allclose(b[:, :, 0], a[:, :, 0])

    def test_bad_window(self, rng):
        with pytest.raises(ValueError):
            y_median_denoise(random_image(rng), 4)


class TestDispatch:
    def test_identity(self, rng):
        img = random_image(rng)
        assert identity_defense(img) is img
        assert apply_defense(img, DefenseConfig(kind="identity")) is img

    def test_identity_then_barrage(self, rng):
        img = random_image(rng, 8, 8)
        cfg = DefenseConfig(seed=11)
        assert apply_barrage(identity_defense(img), cfg) == apply_barrage(img, cfg)

    def test_ymedian(self, rng):
        img = random_image(rng, 8, 8)
        assert apply_defense(img, DefenseConfig(kind="ymedian", window=5)) == y_median_denoise(img, 5)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**63 - 1), st.sampled_from(["barrage", "ymedian", "identity"]), st.sampled_from([1, 3]))
    def test_outputs_in_range(self, seed, kind, channels):
        img = random_image(np.random.default_rng(seed % 2**32), 9, 10, channels)
        out = apply_defense(img, DefenseConfig(kind=kind, seed=seed))
        assert out.shape == img.shape
        assert np.all((out.pixels >= 0) & (out.pixels <= 1))
