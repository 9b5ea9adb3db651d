"""Tests for the deterministic synthetic scene generator."""

import numpy as np
import pytest

from minifpn.errors import ConfigError
from minifpn.scenes import (CLASS_NAMES, VAL_START_INDEX, SceneConfig,
                            SceneDataset, epoch_permutation, generate_sample,
                            generate_split, load_sample, sample_rng,
                            save_sample, size_bucket)

from oracles import iou_cxcywh, mask_extent, rasterize_shape_dense


def cfg(**kw):
    base = dict(image_side=128, min_objects=1, max_objects=3, seed=7)
    base.update(kw)
    return SceneConfig(**base)


class TestSceneConfig:
    def test_defaults_valid(self):
        SceneConfig()

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ConfigError, match="sum to 1"):
            cfg(size_weights=(0.5, 0.5, 0.5, 0.5))

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError, match="non-negative"):
            cfg(size_weights=(-0.5, 0.5, 0.5, 0.5))

    def test_weight_range_length_mismatch(self):
        with pytest.raises(ConfigError, match="align"):
            cfg(size_weights=(0.5, 0.5))

    def test_overlapping_ranges_rejected(self):
        with pytest.raises(ConfigError, match="ascending"):
            cfg(size_ranges=((4, 9), (8, 12), (13, 32), (33, 64)))

    def test_oversized_bucket_rejected(self):
        with pytest.raises(ConfigError, match="cannot fit"):
            cfg(image_side=32)

    def test_oversized_bucket_allowed_at_zero_weight(self):
        cfg(image_side=32, size_weights=(0.5, 0.5, 0.0, 0.0))

    def test_bad_object_counts(self):
        with pytest.raises(ConfigError, match="min_objects"):
            cfg(min_objects=4, max_objects=2)

    def test_size_bucket_matches_ranges(self):
        for bucket, (lo, hi) in enumerate(SceneConfig().size_ranges):
            assert size_bucket(lo) == bucket
            assert size_bucket(hi + 0.999) == bucket


class TestDeterminism:
    def test_same_seed_and_index_bitwise_equal(self):
        c = cfg()
        a = generate_sample(c, 5)
        b = generate_sample(c, 5)
        assert a.image.data.tobytes() == b.image.data.tobytes()
        assert a.boxes == b.boxes

    def test_different_index_differs(self):
        c = cfg()
        a = generate_sample(c, 5)
        b = generate_sample(c, 6)
        assert a.image.data.tobytes() != b.image.data.tobytes()

    def test_different_seed_differs(self):
        a = generate_sample(cfg(seed=7), 5)
        b = generate_sample(cfg(seed=8), 5)
        assert a.image.data.tobytes() != b.image.data.tobytes()

    def test_rng_is_counter_based(self):
        # consuming draws for one index must not disturb another
        c = cfg()
        r = sample_rng(c, 3)
        r.normal(size=1000)
        a = generate_sample(c, 4)
        b = generate_sample(c, 4)
        assert a.image.data.tobytes() == b.image.data.tobytes()


class TestEmptyScene:
    def test_zero_objects(self):
        c = cfg(min_objects=0, max_objects=0)
        s = generate_sample(c, 0)
        assert s.boxes == []
        assert s.image.shape == (1, 3, 128, 128)
        data = s.image.data
        assert np.isfinite(data).all()
        assert data.min() >= 0.0 and data.max() <= 1.0
        assert data.dtype == np.float32


@pytest.fixture(scope="module")
def boxes():
    c = cfg(noise_std=0.0)
    return [generate_sample(c, i).boxes for i in range(2000)]


@pytest.fixture(scope="module")
def rendered():
    c = cfg(noise_std=0.0, min_objects=2, max_objects=4, seed=11)
    return [generate_sample(c, i, keep_masks=True) for i in range(60)]


class TestObjectStatistics:
    def test_counts_in_range(self, boxes):
        assert all(1 <= len(b) <= 3 for b in boxes)

    def test_boxes_are_square_and_inside(self, boxes):
        for sample in boxes:
            for b in sample:
                assert b.w == b.h
                assert b.cx - b.w / 2 >= 0 and b.cx + b.w / 2 <= 128
                assert b.cy - b.h / 2 >= 0 and b.cy + b.h / 2 <= 128

    def test_size_bucket_frequencies(self, boxes):
        counts = np.zeros(4)
        for sample in boxes:
            for b in sample:
                counts[size_bucket(b.w)] += 1
        freq = counts / counts.sum()
        assert counts.sum() > 3000
        np.testing.assert_allclose(freq, 0.25, atol=0.03)

    def test_sizes_stay_in_their_ranges(self, boxes):
        ranges = SceneConfig().size_ranges
        for sample in boxes:
            for b in sample:
                lo, hi = ranges[size_bucket(b.w)]
                assert lo <= b.w < hi + 1

    def test_class_balance(self, boxes):
        counts = np.zeros(3)
        for sample in boxes:
            for b in sample:
                counts[b.class_id] += 1
        np.testing.assert_allclose(counts / counts.sum(), 1 / 3, atol=0.05)

    def test_pairwise_iou_capped(self, boxes):
        for sample in boxes[:300]:
            for i in range(len(sample)):
                for j in range(i + 1, len(sample)):
                    a, b = sample[i], sample[j]
                    assert iou_cxcywh((a.cx, a.cy, a.w, a.h),
                                      (b.cx, b.cy, b.w, b.h)) <= 0.3 + 1e-9


class TestRenderingTightness:
    @staticmethod
    def edges(box):
        return (box.cx - box.w / 2, box.cy - box.h / 2,
                box.cx + box.w / 2, box.cy + box.h / 2)

    def test_mask_extents_within_one_pixel(self, rendered):
        checked = 0
        for s in rendered:
            assert len(s.masks) == len(s.boxes)
            for box, mask in zip(s.boxes, s.masks):
                assert mask.any()
                got = mask_extent(mask)
                for rendered_edge, true_edge in zip(got, self.edges(box)):
                    assert abs(rendered_edge - true_edge) <= 1.0 + 1e-6
                checked += 1
        assert checked > 100

    def test_oracle_raster_agrees(self, rendered):
        for s in rendered[:20]:
            for box, mask in zip(s.boxes, s.masks):
                oracle = rasterize_shape_dense(box.class_id, box.cx, box.cy,
                                               box.w, 128)
                got = mask_extent(oracle)
                for oracle_edge, true_edge in zip(got, self.edges(box)):
                    assert abs(oracle_edge - true_edge) <= 1.0 + 1e-6
                for oracle_edge, rendered_edge in zip(got, mask_extent(mask)):
                    assert abs(oracle_edge - rendered_edge) <= 1.0 + 1e-6

    def test_class_colors_dominate(self, rendered):
        # pixels of each object not overpainted by a later one keep a strong
        # class channel and weak other channels (no noise in this fixture)
        seen = 0
        for s in rendered:
            image = s.image.data[0]
            for i, (box, mask) in enumerate(zip(s.boxes, s.masks)):
                visible = mask.copy()
                for later in s.masks[i + 1:]:
                    visible &= ~later
                if not visible.any():
                    continue
                strong = image[box.class_id, visible]
                others = [image[ch, visible] for ch in range(3)
                          if ch != box.class_id]
                assert strong.min() >= 0.75 - 1e-6
                assert max(o.max() for o in others) <= 0.25 + 1e-6
                seen += 1
        assert seen > 50


class TestSplitsAndDataset:
    def test_split_index_ranges_disjoint(self):
        c = cfg()
        train = generate_split(c, 10, "train")
        val = generate_split(c, 10, "val")
        assert set(train.indices()).isdisjoint(val.indices())
        assert list(val.indices())[0] == VAL_START_INDEX

    def test_val_samples_differ_from_train(self):
        c = cfg()
        train = generate_split(c, 2, "train")
        val = generate_split(c, 2, "val")
        assert train[0].image.data.tobytes() != val[0].image.data.tobytes()

    def test_unknown_split_rejected(self):
        with pytest.raises(ConfigError, match="split"):
            generate_split(cfg(), 4, "test")

    def test_dataset_len_and_bounds(self):
        ds = SceneDataset(cfg(), 3)
        assert len(ds) == 3
        with pytest.raises(IndexError):
            ds[3]
        with pytest.raises(ConfigError, match="count"):
            SceneDataset(cfg(), 0)

    def test_cache_returns_same_object(self):
        ds = SceneDataset(cfg(), 2, cache=True)
        assert ds[0] is ds[0]
        raw = SceneDataset(cfg(), 2, cache=False)
        assert raw[0] is not raw[0]

    def test_dataset_matches_generate_sample(self):
        c = cfg()
        ds = generate_split(c, 3, "val")
        direct = generate_sample(c, VAL_START_INDEX + 2)
        assert ds[2].image.data.tobytes() == direct.image.data.tobytes()


class TestEpochPermutation:
    def test_is_a_permutation(self):
        order = epoch_permutation(3, 0, 50)
        assert sorted(order) == list(range(50))

    def test_deterministic(self):
        assert list(epoch_permutation(3, 4, 64)) == list(epoch_permutation(3, 4, 64))

    def test_epochs_differ(self):
        base = list(epoch_permutation(3, 0, 64))
        assert any(list(epoch_permutation(3, e, 64)) != base for e in (1, 2, 3))

    def test_independent_of_sample_stream(self):
        c = cfg(seed=3)
        a = generate_sample(c, 0)
        epoch_permutation(3, 0, 512)
        b = generate_sample(c, 0)
        assert a.image.data.tobytes() == b.image.data.tobytes()


class TestDiskCache:
    def test_round_trip_bitwise(self, tmp_path):
        c = cfg()
        sample = generate_sample(c, 9)
        save_sample(tmp_path, 9, sample)
        back = load_sample(tmp_path, 9, c)
        assert back.image.data.tobytes() == sample.image.data.tobytes()
        assert back.boxes == sample.boxes

    def test_round_trip_empty(self, tmp_path):
        c = cfg(min_objects=0, max_objects=0)
        sample = generate_sample(c, 0)
        save_sample(tmp_path, 0, sample)
        back = load_sample(tmp_path, 0, c)
        assert back.boxes == []
        assert back.image.data.tobytes() == sample.image.data.tobytes()
