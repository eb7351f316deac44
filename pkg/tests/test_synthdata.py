"""Synthetic corpus generator: determinism, geometry, splits, persistence."""

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from vesseldistill.errors import ConfigError, ShapeError
from vesseldistill.synthdata import (TRANSFORMS, AngiogramSample, SynthConfig,
                                     apply_transform, augment, build_split,
                                     crop_patches, generate_image,
                                     load_corpus, save_corpus,
                                     split_parent_ids, _corners)


def small_cfg(**kw):
    base = dict(seed=5, canvas_size=96, n_images=6,
                vessel_width_range=(2.0, 5.0), branch_count_range=(2, 4))
    base.update(kw)
    return SynthConfig(**base)


class TestConfig:
    def test_defaults_valid(self):
        SynthConfig().validate()

    def test_default_protocol_values(self):
        cfg = SynthConfig()
        assert cfg.canvas_size == 992
        assert cfg.n_images == 240

    @pytest.mark.parametrize("kw", [
        {"canvas_size": 0},
        {"n_images": 0},
        {"vessel_width_range": (0.5, 3.0)},   # below one pixel
        {"vessel_width_range": (5.0, 3.0)},   # empty range
        {"contrast_range": (0.9, 0.2)},
        {"branch_count_range": (0, 2)},
        {"clutter_level": -1.0},
    ])
    def test_invalid_configs(self, kw):
        with pytest.raises(ConfigError):
            SynthConfig(**kw).validate()


class TestGenerateImage:
    def test_deterministic(self):
        cfg = small_cfg()
        a = generate_image(cfg, 2)
        b = generate_image(cfg, 2)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)
        assert a.id == b.id == "img0002"

    def test_indices_independent(self):
        cfg = small_cfg()
        a = generate_image(cfg, 0)
        b = generate_image(cfg, 1)
        assert not np.array_equal(a.image, b.image)

    def test_value_ranges(self):
        s = generate_image(small_cfg(), 0)
        assert s.image.dtype == np.float64
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.mask.dtype == np.uint8
        assert set(np.unique(s.mask)) <= {0, 1}
        assert s.image.shape == s.mask.shape == (96, 96)

    def test_eight_bit_quantized(self):
        s = generate_image(small_cfg(), 1)
        assert np.array_equal(s.image, np.round(s.image * 255) / 255)

    def test_degenerate_generator_is_blurred_mask(self):
        # no clutter, fixed unit contrast: image must equal the blurred
        # mask rendering exactly (after 8-bit quantization)
        cfg = small_cfg(clutter_level=0.0, contrast_range=(1.0, 1.0))
        s = generate_image(cfg, 3)
        sigma = s.provenance["sigma"]
        expect = np.clip(1.0 - gaussian_filter(s.mask.astype(np.float64), sigma), 0.0, 1.0)
        expect = np.round(expect * 255) / 255
        assert np.array_equal(s.image, expect)

    def test_vessels_darker_than_background(self):
        s = generate_image(small_cfg(clutter_level=0.0), 0)
        fg = s.image[s.mask == 1].mean()
        bg = s.image[s.mask == 0].mean()
        assert fg < bg

    def test_index_out_of_range(self):
        cfg = small_cfg(n_images=3)
        with pytest.raises(ValueError):
            generate_image(cfg, 3)

    def test_foreground_fraction_band(self):
        # regression band measured on the default generator
        cfg = SynthConfig(seed=0, canvas_size=248, n_images=100)
        fracs = [generate_image(cfg, i).mask.mean() for i in range(100)]
        mean_frac = float(np.mean(fracs))
        assert 0.01 <= mean_frac <= 0.15


class TestCorners:
    def test_full_scale_grid(self):
        # floor((992-256)/3) = 245, last corner flush at 736
        assert _corners(992, 256, 4) == [0, 245, 490, 736]

    def test_flush_last_corner(self):
        corners = _corners(100, 30, 3)
        assert corners[0] == 0
        assert corners[-1] == 70

    def test_single_patch(self):
        assert _corners(64, 64, 1) == [0]


class TestCropPatches:
    def test_grid_count_and_ids(self):
        s = generate_image(small_cfg(), 0)
        patches = crop_patches(s, 48, (2, 2))
        assert len(patches) == 4
        assert [p.id for p in patches] == [
            "img0000_r0c0", "img0000_r0c1", "img0000_r1c0", "img0000_r1c1"]
        for p in patches:
            assert p.image.shape == (48, 48)
            assert p.provenance["parent"] == "img0000"

    def test_identity_crop(self):
        s = generate_image(small_cfg(), 1)
        (only,) = crop_patches(s, 96, (1, 1))
        assert np.array_equal(only.image, s.image)
        assert np.array_equal(only.mask, s.mask)

    def test_corners_flush_with_border(self):
        s = generate_image(small_cfg(), 0)
        patches = crop_patches(s, 48, (3, 3))
        # the last row/col patch must end exactly at the image border
        last = patches[-1]
        r0, c0 = last.provenance["y"], last.provenance["x"]
        assert r0 + 48 == 96 and c0 + 48 == 96

    def test_patch_content_matches_parent(self):
        s = generate_image(small_cfg(), 2)
        patches = crop_patches(s, 48, (2, 2))
        for p in patches:
            r0, c0 = p.provenance["y"], p.provenance["x"]
            assert np.array_equal(p.image, s.image[r0:r0 + 48, c0:c0 + 48])
            assert np.array_equal(p.mask, s.mask[r0:r0 + 48, c0:c0 + 48])

    def test_patch_larger_than_image(self):
        s = generate_image(small_cfg(), 0)
        with pytest.raises((ValueError, ShapeError)):
            crop_patches(s, 128, (2, 2))

    def test_default_protocol_patch_count(self):
        # 4x4 grid on every parent: 240 parents x 16 = 3840 patches total
        cfg = SynthConfig()
        per_parent = 16
        assert cfg.n_images * per_parent == 3840


class TestAugment:
    def test_hflip_involution(self):
        s = generate_image(small_cfg(), 0)
        once = apply_transform(s, "hflip")
        twice = apply_transform(once, "hflip")
        assert np.array_equal(twice.image, s.image)
        assert np.array_equal(twice.mask, s.mask)

    def test_rot90_four_times_identity(self):
        s = generate_image(small_cfg(), 1)
        out = s
        for _ in range(4):
            out = apply_transform(out, "rot90")
        assert np.array_equal(out.image, s.image)

    @pytest.mark.parametrize("name", TRANSFORMS)
    def test_foreground_count_preserved(self, name):
        s = generate_image(small_cfg(), 2)
        out = apply_transform(s, name)
        assert out.mask.sum() == s.mask.sum()
        assert out.image.shape == s.image.shape

    def test_mask_and_image_move_together(self):
        s = generate_image(small_cfg(clutter_level=0.0), 0)
        out = apply_transform(s, "rot180")
        # vessels must still sit on dark pixels after the transform
        fg = out.image[out.mask == 1].mean()
        bg = out.image[out.mask == 0].mean()
        assert fg < bg

    def test_seeded_choice_stable(self):
        s = generate_image(small_cfg(), 0)
        a = augment(s, seed=9)
        b = augment(s, seed=9)
        assert np.array_equal(a.image, b.image)

    def test_seeds_cover_multiple_transforms(self):
        s = generate_image(small_cfg(), 0)
        outs = {augment(s, seed=k).image.tobytes() for k in range(12)}
        assert len(outs) > 1

    def test_unknown_transform(self):
        s = generate_image(small_cfg(), 0)
        with pytest.raises(ValueError):
            apply_transform(s, "transpose")


class TestSplit:
    def test_full_scale_counts(self):
        cfg = SynthConfig(seed=1)
        train, test = split_parent_ids(cfg, 5.0 / 6.0)
        assert len(train) == 200 and len(test) == 40

    def test_two_parent_half_split(self):
        cfg = small_cfg(n_images=2)
        train, test = split_parent_ids(cfg, 0.5)
        assert len(train) == 1 and len(test) == 1

    def test_deterministic(self):
        cfg = small_cfg()
        assert split_parent_ids(cfg, 0.5) == split_parent_ids(cfg, 0.5)

    def test_disjoint_and_complete(self):
        cfg = small_cfg(n_images=10)
        train, test = split_parent_ids(cfg, 0.7)
        assert set(train) & set(test) == set()
        assert len(train) + len(test) == 10

    def test_empty_side_rejected(self):
        cfg = small_cfg(n_images=3)
        with pytest.raises(ConfigError):
            split_parent_ids(cfg, 0.01)

    def test_no_parent_leakage_in_built_split(self):
        cfg = small_cfg(n_images=8)
        split = build_split(cfg, 0.75, patch_size=48, grid=(2, 2))
        train_parents = {p.provenance["parent"] for p in split.train}
        test_parents = {p.provenance["parent"] for p in split.test}
        assert train_parents & test_parents == set()
        assert len(split.train) == 6 * 4
        assert len(split.test) == 2 * 4


class TestCorpusRoundTrip:
    def test_save_load_exact(self, tmp_path):
        cfg = small_cfg(n_images=4)
        split = build_split(cfg, 0.75, patch_size=48, grid=(2, 2))
        save_corpus(tmp_path / "c", cfg, 0.75, patch_size=48, grid=(2, 2))
        loaded, manifest = load_corpus(tmp_path / "c")
        assert len(loaded.train) == len(split.train)
        assert len(loaded.test) == len(split.test)
        by_id = {p.id: p for p in split.train + split.test}
        for p in loaded.train + loaded.test:
            ref = by_id[p.id]
            assert np.array_equal(p.image, ref.image), p.id
            assert np.array_equal(p.mask, ref.mask), p.id

    def test_manifest_counts(self, tmp_path):
        cfg = small_cfg(n_images=4)
        save_corpus(tmp_path / "c", cfg, 0.75, patch_size=48, grid=(2, 2))
        _, manifest = load_corpus(tmp_path / "c")
        assert len(manifest["parents"]) == 4
        assert len(manifest["patches"]) == 16

    def test_missing_corpus(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_corpus(tmp_path / "nope")


class TestSampleValidation:
    def test_bad_image_range(self):
        s = generate_image(small_cfg(), 0)
        bad = AngiogramSample(image=s.image + 2.0, mask=s.mask, id=s.id,
                              provenance=s.provenance)
        with pytest.raises((ConfigError, ValueError)):
            bad.validate()

    def test_shape_mismatch(self):
        s = generate_image(small_cfg(), 0)
        bad = AngiogramSample(image=s.image[:-1], mask=s.mask, id=s.id,
                              provenance=s.provenance)
        with pytest.raises((ShapeError, ValueError)):
            bad.validate()
