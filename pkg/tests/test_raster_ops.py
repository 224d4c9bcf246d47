import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from siamdamage.raster_ops import (
    AugmentationConfig,
    ResolutionSchedule,
    augment,
    bilinear_matrix,
    box_matrix,
    degrade_restore,
    hue_rotate,
    resample,
    resampled_size,
)
from siamdamage.scene_data import MaskStack, RasterImage

NOISE_DIGEST = "400c09cc91884e6a1fff6ada40b5da17f03467cb5241265b1cee3300dbc559bf"


def smooth_image(seed, side=64):
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(size=(side // 8, side // 8, 3))
    return RasterImage(np.kron(coarse, np.ones((8, 8, 1))) * 0.8 + 0.1 * rng.uniform(size=(side, side, 3)), 0.5)


def sample_inputs(seed=0, side=16):
    rng = np.random.default_rng(seed)
    pre = RasterImage(rng.uniform(size=(side, side, 3)), 0.5)
    post = RasterImage(rng.uniform(size=(side, side, 3)), 0.5)
    mask = MaskStack.from_grades(rng.integers(0, 5, (side, side)))
    return pre, post, mask


class TestSchedule:
    def test_default(self):
        assert ResolutionSchedule().gsds == (0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 10.0)

    def test_parse(self):
        assert ResolutionSchedule.parse("0.5, 2,10").gsds == (0.5, 2.0, 10.0)

    def test_must_increase(self):
        with pytest.raises(ValueError):
            ResolutionSchedule((0.5, 0.5, 1.0))


class TestResample:
    def test_native_is_identity(self):
        img = smooth_image(0)
        assert resample(img, 0.5) is img
        assert degrade_restore(img, 0.5) is img

    def test_sizes(self):
        assert resampled_size(1024, 0.5, 1.0) == 512
        assert resampled_size(1024, 0.5, 10.0) == 51
        assert resampled_size(3, 0.5, 10.0) == 1

    def test_resample_shape_and_gsd(self):
        out = resample(RasterImage(np.zeros((128, 128, 3)), 0.5), 10.0)
        assert out.pixels.shape == (6, 6, 3) and out.gsd == 10.0

    def test_finer_target_rejected(self):
        with pytest.raises(ValueError):
            resample(smooth_image(0), 0.25)
        with pytest.raises(ValueError):
            degrade_restore(smooth_image(0), 0.25)

    def test_box_matches_block_mean_for_integer_factor(self):
        img = smooth_image(1)
        out = resample(img, 2.0)
        blocks = img.pixels.reshape(16, 4, 16, 4, 3).mean(axis=(1, 3))
        assert np.allclose(out.pixels, blocks, atol=1e-12)

    @given(st.integers(1, 40), st.integers(1, 40))
    def test_operator_rows_are_partitions_of_unity(self, n_in, n_out):
        assert np.allclose(bilinear_matrix(n_in, n_out).sum(axis=1), 1.0)
        if n_out <= n_in:
            assert np.allclose(box_matrix(n_in, n_out).sum(axis=1), 1.0)
            # every input pixel is used with total weight n_out / n_in
            assert np.allclose(box_matrix(n_in, n_out).sum(axis=0), n_out / n_in)

    @pytest.mark.parametrize("gsd", [1.0, 2.0, 3.0, 10.0])
    def test_constant_image_unchanged(self, gsd):
        img = RasterImage(np.full((40, 40, 3), 0.37), 0.5)
        out = degrade_restore(img, gsd)
        assert np.allclose(out.pixels, 0.37, atol=1e-12)
        assert out.gsd == 0.5 and out.effective_gsd == gsd

    def test_impulse_energy_at_factor_two(self):
        px = np.zeros((32, 32, 1))
        px[13, 18] = 1.0
        out = degrade_restore(RasterImage(px, 0.5), 1.0)
        assert abs(out.pixels.sum() - 1.0) <= 1e-6

    @pytest.mark.parametrize("gsd", [1.0, 2.0, 3.0, 4.0, 5.0, 10.0])
    @pytest.mark.parametrize("seed", [0, 1])
    def test_mean_preserved(self, gsd, seed):
        img = smooth_image(seed)
        assert abs(degrade_restore(img, gsd).pixels.mean() - img.pixels.mean()) <= 1e-3


class TestAugment:
    def test_all_off_returns_inputs(self):
        pre, post, mask = sample_inputs()
        out = augment(pre, post, mask, AugmentationConfig())
        assert out[0] is pre and out[1] is post and out[2] is mask

    def test_hflip_is_an_involution(self):
        pre, post, mask = sample_inputs()
        cfg = AugmentationConfig(hflip=True, p=1.0)
        once = augment(pre, post, mask, cfg)
        assert not np.array_equal(once[0].pixels, pre.pixels)
        twice = augment(*once, cfg)
        assert twice[0] == pre and twice[1] == post
        assert np.array_equal(twice[2].as_array(), mask.as_array())

    def test_noise_digest(self):
        pre, post, mask = sample_inputs()
        cfg = AugmentationConfig(noise_sigma=0.1, p=1.0, seed=11)
        a, b, _ = augment(pre, pre, mask, cfg, counter=3)
        a2, b2, _ = augment(pre, pre, mask, cfg, counter=3)
        assert a == a2 and b == b2
        assert hashlib.sha256(a.pixels.tobytes() + b.pixels.tobytes()).hexdigest() == NOISE_DIGEST

    def test_counter_changes_draw(self):
        pre, post, mask = sample_inputs()
        cfg = AugmentationConfig(noise_sigma=0.1, p=1.0)
        assert augment(pre, post, mask, cfg, 0)[0] != augment(pre, post, mask, cfg, 1)[0]

    def test_photometric_leaves_mask_alone(self):
        pre, post, mask = sample_inputs()
        cfg = AugmentationConfig(hue_shift_deg=20, brightness=(0.5, 1.5), contrast=(0.5, 1.5), blur_sigma=2, p=1.0)
        _, _, m = augment(pre, post, mask, cfg)
        assert np.array_equal(m.as_array(), mask.as_array())

    def test_pre_and_post_share_geometry(self):
        pre, _, mask = sample_inputs()
        cfg = AugmentationConfig(hflip=True, vflip=True, rot90=True, rotation_deg=30, shift_px=3, crop_fraction=0.6, p=1.0)
        for counter in range(5):
            a, b, m = augment(pre, pre, mask, cfg, counter)
            assert a == b
            assert set(np.unique(m.as_array())) <= {0.0, 1.0}

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_right_angle_transforms_keep_grade_histogram(self, counter):
        pre, post, mask = sample_inputs(side=12)
        cfg = AugmentationConfig(hflip=True, vflip=True, rot90=True, p=0.5, seed=counter)
        _, _, m = augment(pre, post, mask, cfg, counter)
        before = np.bincount(mask.grade_map().ravel(), minlength=5)
        after = np.bincount(m.grade_map().ravel(), minlength=5)
        assert np.array_equal(before, after)

    def test_hue_rotation_round_trip(self):
        px = np.random.default_rng(0).uniform(size=(4, 4, 3))
        assert np.allclose(hue_rotate(hue_rotate(px, 30), -30), px, atol=1e-12)
        assert np.allclose(hue_rotate(px, 0), px, atol=1e-12)
