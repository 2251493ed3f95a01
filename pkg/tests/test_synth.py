"""Synthetic scene generator: determinism, panoptic structure, codebooks."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from pixelphrase.model import ModelConfig, ModelParams
from pixelphrase.synth import (
    GenerationError,
    SceneConfig,
    Sample,
    codebooks,
    generate_dataset,
    generate_scene,
    load_dataset,
    read_bundle,
    write_bundle,
)


def _cfg(**overrides):
    base = dict(height=12, width=12, num_phrases=6, num_classes=5,
                visual_channels=16, phrase_channels=16, noise_sigma=0.1,
                seed=0)
    base.update(overrides)
    return SceneConfig(**base)


class TestConfig:
    def test_fraction_bounds(self):
        with pytest.raises(ValueError, match="things_fraction"):
            _cfg(things_fraction=1.5)
        with pytest.raises(ValueError, match="ungrounded_fraction"):
            _cfg(ungrounded_fraction=-0.1)

    def test_negative_noise_rejected(self):
        with pytest.raises(ValueError, match="noise"):
            _cfg(noise_sigma=-1.0)

    def test_codebook_capacity_enforced(self):
        with pytest.raises(ValueError, match="visual_channels"):
            _cfg(num_classes=5, visual_channels=4)
        with pytest.raises(ValueError, match="phrase_channels"):
            _cfg(num_classes=5, phrase_channels=5)

    def test_roundtrips_via_dict(self):
        cfg = _cfg(noise_sigma=0.3, seed=9)
        assert SceneConfig.from_dict(cfg.to_dict()) == cfg


class TestCodebooks:
    def test_rows_orthonormal(self):
        class_code, phrase_code = codebooks(_cfg())
        assert class_code.shape == (5, 16)
        assert phrase_code.shape == (6, 16)
        assert_allclose(class_code @ class_code.T, np.eye(5), atol=1e-6)
        assert_allclose(phrase_code @ phrase_code.T, np.eye(6), atol=1e-6)

    def test_deterministic_per_seed(self):
        a_cls, a_phr = codebooks(_cfg(seed=3))
        b_cls, b_phr = codebooks(_cfg(seed=3))
        assert np.array_equal(a_cls, b_cls)
        assert np.array_equal(a_phr, b_phr)

    def test_seeds_give_different_books(self):
        a_cls, _ = codebooks(_cfg(seed=0))
        b_cls, _ = codebooks(_cfg(seed=1))
        assert not np.array_equal(a_cls, b_cls)

    def test_shared_across_sample_indices(self):
        cfg = _cfg(noise_sigma=0.0, ungrounded_fraction=0.0)
        class_code, _ = codebooks(cfg)
        for index in (0, 5):
            sample = generate_scene(cfg, index=index)
            cls_grid = np.asarray(sample.instance_classes)[sample.segments]
            assert_allclose(sample.visual, class_code[cls_grid], atol=0)


class TestGenerateScene:
    def test_zero_noise_pixels_equal_class_code(self):
        cfg = _cfg(num_phrases=1, num_classes=1, noise_sigma=0.0,
                   phrase_channels=4, visual_channels=4,
                   ungrounded_fraction=0.0, plural_fraction=0.0)
        class_code, phrase_code = codebooks(cfg)
        sample = generate_scene(cfg)
        # one class covering the whole grid: every pixel is the class code
        assert_allclose(sample.visual,
                        np.broadcast_to(class_code[0], (12, 12, 4)), atol=0)
        assert_allclose(sample.phrases[0], phrase_code[0], atol=0)
        assert sample.truth.masks[0].sum() == 12 * 12

    def test_same_seed_is_bit_identical(self):
        cfg = _cfg(seed=7)
        a = generate_scene(cfg, index=3)
        b = generate_scene(cfg, index=3)
        assert np.array_equal(a.visual, b.visual)
        assert np.array_equal(a.phrases, b.phrases)
        assert np.array_equal(a.truth.masks, b.truth.masks)
        assert np.array_equal(a.segments, b.segments)
        assert a.annotations == b.annotations

    def test_indices_give_different_scenes(self):
        cfg = _cfg(seed=7)
        a = generate_scene(cfg, index=0)
        b = generate_scene(cfg, index=1)
        assert not np.array_equal(a.visual, b.visual)

    def test_segments_partition_grid(self):
        sample = generate_scene(_cfg(seed=11), index=2)
        n_inst = len(sample.instance_classes)
        present = np.unique(sample.segments)
        assert present.min() == 0 and present.max() == n_inst - 1
        assert len(present) == n_inst  # every instance keeps >= 1 pixel

    def test_plural_mask_is_union_of_two_instances(self):
        cfg = _cfg(seed=1, plural_fraction=0.5, num_phrases=8)
        sample = generate_scene(cfg, index=0)
        inst_cls = np.asarray(sample.instance_classes)
        plural_anns = [a for a in sample.annotations
                       if a["plurality"] == "plural"]
        assert plural_anns, "config should yield at least one plural phrase"
        for ann in plural_anns:
            cls = ann["class"]
            inst_ids = np.nonzero(inst_cls == cls)[0]
            assert len(inst_ids) == 2
            parts = [sample.segments == i for i in inst_ids]
            # panoptic: instances are disjoint, so areas add up
            union = parts[0] | parts[1]
            assert union.sum() == parts[0].sum() + parts[1].sum()
            assert np.array_equal(sample.truth.masks[ann["id"]] > 0, union)
            assert parts[0].sum() > 0 and parts[1].sum() > 0

    def test_grounded_flag_matches_mask_content(self):
        cfg = _cfg(seed=5, ungrounded_fraction=0.4)
        sample = generate_scene(cfg, index=1)
        for ann in sample.annotations:
            i = ann["id"]
            has_pixels = sample.truth.masks[i].sum() > 0
            assert ann["grounded"] == has_pixels
            assert sample.truth.valid[i] == ann["grounded"]
            if not ann["grounded"]:
                assert ann["class"] is None
                assert ann["category"] is None
                assert ann["plurality"] is None

    def test_zero_noise_classes_linearly_separable(self):
        cfg = _cfg(noise_sigma=0.0)
        class_code, _ = codebooks(cfg)
        sample = generate_scene(cfg, index=4)
        cls_grid = np.asarray(sample.instance_classes)[sample.segments]
        # dot with own class code is 1, with any other class 0
        dots = sample.visual @ class_code.T        # (H, W, K)
        own = np.take_along_axis(dots, cls_grid[..., None], axis=-1)[..., 0]
        assert_allclose(own, np.ones_like(own), atol=1e-5)
        hits = dots > 0.5
        assert hits.sum() == cls_grid.size  # exactly one strong class per pixel

    def test_word_spans_are_contiguous_partition(self):
        sample = generate_scene(_cfg(seed=2), index=0)
        cursor = 0
        for ann in sample.annotations:
            span = ann["word_span"]
            assert span == list(range(cursor, cursor + len(span)))
            assert len(span) in (1, 2)
            cursor += len(span)

    def test_masks_can_repeat_across_phrases(self):
        # many phrases over few classes force shared masks
        cfg = _cfg(num_phrases=12, num_classes=3, plural_fraction=0.0,
                   ungrounded_fraction=0.0, seed=3, visual_channels=8,
                   phrase_channels=8)
        sample = generate_scene(cfg, index=0)
        classes = [a["class"] for a in sample.annotations]
        dup = len(classes) != len(set(classes))
        assert dup
        # identical class implies identical mask
        for a in sample.annotations:
            for b in sample.annotations:
                if a["class"] == b["class"]:
                    assert np.array_equal(sample.truth.masks[a["id"]],
                                          sample.truth.masks[b["id"]])

    def test_unplaceable_stuff_bands_raise(self):
        cfg = _cfg(height=4, width=8, num_classes=6, things_fraction=0.0,
                   num_phrases=2, visual_channels=8, phrase_channels=8)
        with pytest.raises(GenerationError):
            generate_scene(cfg)

    def test_at_least_one_stuff_class(self):
        # things_fraction=1 still leaves one stuff band as background
        cfg = _cfg(things_fraction=1.0, seed=6)
        sample = generate_scene(cfg, index=0)
        # instance 0 is the single background band: it owns class 0 alone
        assert sample.instance_classes[0] == 0
        assert sample.instance_classes.count(0) == 1
        # any phrase tagged stuff must reference that background class
        for ann in sample.annotations:
            if ann["category"] == "stuff":
                assert ann["class"] == 0


class TestBundleDispatch:
    def test_sample_roundtrip_preserves_arrays(self, tmp_path):
        sample = generate_scene(_cfg(seed=8), index=1)
        write_bundle(sample, tmp_path / "s")
        back = read_bundle(tmp_path / "s")
        assert isinstance(back, Sample)
        assert np.array_equal(back.visual, sample.visual)
        assert np.array_equal(back.phrases, sample.phrases)
        assert np.array_equal(back.truth.masks, sample.truth.masks)
        assert np.array_equal(back.truth.valid, sample.truth.valid)
        assert back.annotations == sample.annotations
        assert back.truth.categories == sample.truth.categories
        assert back.truth.pluralities == sample.truth.pluralities

    def test_checkpoint_roundtrip_via_dispatch(self, tmp_path):
        cfg = ModelConfig(channels=4, heads=2, compatible_pixels=2, rounds=1,
                          visual_channels=4, phrase_channels=4, norm_groups=2,
                          positional=False)
        params = ModelParams.initialize(cfg, seed=0)
        write_bundle(params, tmp_path / "ckpt")
        back = read_bundle(tmp_path / "ckpt")
        assert isinstance(back, ModelParams)
        assert back.config == cfg

    def test_unknown_object_rejected(self, tmp_path):
        with pytest.raises(TypeError):
            write_bundle({"not": "bundleable"}, tmp_path / "x")


class TestDataset:
    def test_generate_and_load(self, tmp_path):
        cfg = _cfg(seed=4)
        names = generate_dataset(cfg, 5, tmp_path / "data")
        assert names == [f"sample_{i:05d}" for i in range(5)]
        assert (tmp_path / "data" / "index.json").is_file()
        samples = load_dataset(tmp_path / "data")
        assert len(samples) == 5

    def test_threaded_generation_is_byte_identical(self, tmp_path):
        cfg = _cfg(seed=10)
        generate_dataset(cfg, 6, tmp_path / "serial", threads=1)
        generate_dataset(cfg, 6, tmp_path / "parallel", threads=3)
        for i in range(6):
            name = f"sample_{i:05d}"
            for f in sorted((tmp_path / "serial" / name).iterdir()):
                other = tmp_path / "parallel" / name / f.name
                assert f.read_bytes() == other.read_bytes(), f.name

    def test_samples_match_direct_generation(self, tmp_path):
        cfg = _cfg(seed=12)
        generate_dataset(cfg, 3, tmp_path / "data")
        samples = load_dataset(tmp_path / "data")
        for i, loaded in enumerate(samples):
            direct = generate_scene(cfg, index=i)
            assert np.array_equal(loaded.visual, direct.visual)
            assert np.array_equal(loaded.truth.masks, direct.truth.masks)

    def test_missing_index_rejected(self, tmp_path):
        from pixelphrase.bundle import BundleError
        (tmp_path / "empty").mkdir()
        with pytest.raises(BundleError, match="index"):
            load_dataset(tmp_path / "empty")

    def test_zero_count_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(_cfg(), 0, tmp_path / "data")
