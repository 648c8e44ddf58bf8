import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_bilinear, segment_distance
from vcl import pnm
from vcl.data import (
    AugmentConfig,
    DatasetError,
    LabeledDataset,
    SplitSpec,
    augment,
    load_dataset,
    resize_bilinear,
    save_dataset,
    smote_balance,
    split_indices,
    stratified_split,
    synth_dataset,
)


def _dataset(counts, hw=(4, 4), seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(counts)), counts)
    images = rng.random((len(labels),) + tuple(hw) + (1,)).astype(np.float32)
    return LabeledDataset(images, labels, [f"c{i}" for i in range(len(counts))])


class TestLoad:
    def test_two_classes(self, tmp_path):
        for name in ("meningioma", "glioma"):
            (tmp_path / name).mkdir()
            for i in range(2):
                pnm.write(tmp_path / name / f"{i}.pgm", np.full((3, 3), 0.5))
        ds = load_dataset(tmp_path)
        assert len(ds) == 4 and ds.num_classes == 2
        assert ds.class_names == ["glioma", "meningioma"]
        assert ds.labels.tolist() == [0, 0, 1, 1]

    def test_normalization_endpoints(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "a" / "x.pgm").write_bytes(b"P5\n2 1\n255\n" + bytes([255, 0]))
        ds = load_dataset(tmp_path)
        assert ds.images[0, 0, 0, 0] == 1.0 and ds.images[0, 0, 1, 0] == 0.0

    def test_color_gives_three_channels(self, tmp_path):
        (tmp_path / "a").mkdir()
        pnm.write(tmp_path / "a" / "x.ppm", np.zeros((2, 2, 3)))
        assert load_dataset(tmp_path).images.shape == (1, 2, 2, 3)

    def test_empty_root(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)

    def test_malformed_file_is_named(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "a" / "bad.pgm").write_bytes(b"P5\n9 9\n255\n")
        with pytest.raises(pnm.PNMError, match="bad.pgm"):
            load_dataset(tmp_path)

    def test_mixed_channels(self, tmp_path):
        (tmp_path / "a").mkdir()
        pnm.write(tmp_path / "a" / "1.pgm", np.zeros((2, 2)))
        pnm.write(tmp_path / "a" / "2.ppm", np.zeros((2, 2, 3)))
        with pytest.raises(DatasetError, match="channel"):
            load_dataset(tmp_path)

    def test_mixed_sizes_need_target(self, tmp_path):
        (tmp_path / "a").mkdir()
        pnm.write(tmp_path / "a" / "1.pgm", np.zeros((2, 2)))
        pnm.write(tmp_path / "a" / "2.pgm", np.zeros((3, 3)))
        with pytest.raises(DatasetError):
            load_dataset(tmp_path)
        assert load_dataset(tmp_path, (4, 4)).images.shape == (2, 4, 4, 1)

    def test_save_load_round_trip(self, tmp_path):
        ds = synth_dataset(3, 4, (8, 8), seed=1)
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        assert back.class_names == ds.class_names
        np.testing.assert_array_equal(back.labels, ds.labels)
        assert np.max(np.abs(back.images - ds.images)) <= 0.5 / 255 + 1e-7


class TestResize:
    def test_identity_is_bitwise(self):
        x = np.random.default_rng(0).random((1, 2, 2, 1)).astype(np.float32)
        assert resize_bilinear(x, (2, 2)).tobytes() == x.tobytes()

    def test_corner_aligned(self):
        out = resize_bilinear(np.array([0.0, 1.0], dtype=np.float32).reshape(1, 1, 2, 1), (1, 3))
        np.testing.assert_array_equal(out[0, 0, :, 0], [0.0, 0.5, 1.0])

    def test_constant_preserved(self):
        out = resize_bilinear(np.full((1, 256, 256, 1), 0.7, dtype=np.float32), (128, 128))
        assert np.max(np.abs(out - 0.7)) <= 1e-6

    def test_matches_pixel_loop(self):
        img = np.random.default_rng(1).random((5, 7))
        out = resize_bilinear(img[None, :, :, None], (9, 4))[0, :, :, 0]
        np.testing.assert_allclose(out, naive_bilinear(img, 9, 4), atol=1e-12)

    def test_zero_target_rejected(self):
        with pytest.raises(ValueError):
            resize_bilinear(np.zeros((1, 2, 2, 1)), (0, 2))


class TestSmote:
    def test_counts_reach_mean(self):
        out = smote_balance(_dataset([10, 20, 60]), k=5, seed=3)
        assert out.class_counts().tolist() == [30, 30, 60]

    def test_originals_preserved(self):
        ds = _dataset([10, 20, 60])
        out = smote_balance(ds, seed=3)
        assert out.images[: len(ds)].tobytes() == ds.images.tobytes()
        assert out.labels[: len(ds)].tolist() == ds.labels.tolist()

    def test_balanced_input_unchanged(self):
        ds = _dataset([142] * 3, hw=(2, 2))
        out = smote_balance(ds)
        assert out.images.tobytes() == ds.images.tobytes()
        assert out.labels.tolist() == ds.labels.tolist()

    def test_synthetic_points_lie_on_class_segments(self):
        ds = _dataset([10, 20, 60])
        out = smote_balance(ds, seed=11)
        for i in range(len(ds), len(out)):
            c = out.labels[i]
            members = ds.images[ds.labels == c].reshape(-1, 16).astype(np.float64)
            s = out.images[i].reshape(-1).astype(np.float64)
            best = min(segment_distance(s, a, b) for a, b in itertools.combinations(members, 2))
            assert best <= 1e-5

    def test_neighbours_limited_to_k_nearest(self):
        # with k=1 each synthetic point must sit between a member and its single nearest neighbour
        ds = _dataset([4, 10], hw=(3, 3), seed=5)
        out = smote_balance(ds, k=1, seed=2)
        members = ds.images[ds.labels == 0].reshape(4, -1).astype(np.float64)
        d = np.linalg.norm(members[:, None] - members[None], axis=-1)
        np.fill_diagonal(d, np.inf)
        pairs = [(i, int(np.argmin(d[i]))) for i in range(4)]
        for s in out.images[len(ds):].reshape(-1, 9).astype(np.float64):
            assert min(segment_distance(s, members[a], members[b]) for a, b in pairs) <= 1e-5

    def test_singleton_minority_rejected(self):
        with pytest.raises(DatasetError, match="c0"):
            smote_balance(_dataset([1, 20]))

    def test_round_half_up(self):
        # mean 2.5 rounds to 3
        assert smote_balance(_dataset([2, 3]), seed=0).class_counts().tolist() == [3, 3]

    def test_deterministic(self):
        a = smote_balance(_dataset([5, 9]), seed=4)
        b = smote_balance(_dataset([5, 9]), seed=4)
        assert a.images.tobytes() == b.images.tobytes()

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(2, 12), min_size=2, max_size=5), st.integers(0, 2**32))
    def test_counts_property(self, counts, seed):
        out = smote_balance(_dataset(counts, hw=(2, 2)), seed=seed).class_counts()
        target = int(np.floor(np.mean(counts) + 0.5))
        assert out.tolist() == [max(c, target) for c in counts]


class TestAugment:
    def _batch(self, seed=0):
        return np.random.default_rng(seed).random((4, 16, 16, 1)).astype(np.float32)

    def test_zero_factors_identity(self):
        x = self._batch()
        cfg = AugmentConfig(flip_prob=0.0, rotation_factor=0.0, zoom_factor=0.0, target_hw=(16, 16))
        assert augment(x, cfg, np.random.default_rng(0)).tobytes() == x.tobytes()

    def test_flip_reverses_columns(self):
        x = np.tile(np.linspace(0, 1, 16, dtype=np.float32), (1, 16, 1))[..., None]
        cfg = AugmentConfig(flip_prob=1.0, rotation_factor=0.0, zoom_factor=0.0, target_hw=(16, 16))
        out = augment(x, cfg, np.random.default_rng(0))
        np.testing.assert_array_equal(out, x[:, :, ::-1])

    def test_mass_roughly_preserved(self):
        cfg = AugmentConfig(target_hw=(16, 16))
        for seed in range(100):
            x = self._batch(seed)
            out = augment(x, cfg, np.random.default_rng(seed))
            assert abs(out.mean() - x.mean()) < 0.05

    def test_output_range_and_shape(self):
        x = self._batch()
        out = augment(x, AugmentConfig(rotation_factor=0.2, zoom_factor=0.3, target_hw=(16, 16)), np.random.default_rng(1))
        assert out.shape == x.shape and out.min() >= 0 and out.max() <= 1

    def test_same_rng_same_output(self):
        x = self._batch()
        a = augment(x, AugmentConfig(target_hw=(16, 16)), np.random.default_rng(9))
        b = augment(x, AugmentConfig(target_hw=(16, 16)), np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()


class TestSplit:
    def test_37_by_100_sizes(self):
        labels = np.repeat(np.arange(37), 100)
        tr, va, te = split_indices(labels, 37, SplitSpec())
        assert (len(tr), len(va), len(te)) == (2960, 370, 370)

    def test_class_of_ten(self):
        tr, va, te = split_indices(np.zeros(10, dtype=int), 1, SplitSpec())
        assert (len(tr), len(va), len(te)) == (8, 1, 1)

    def test_remainder_to_train(self):
        tr, va, te = split_indices(np.zeros(7, dtype=int), 1, SplitSpec())
        assert (len(tr), len(va), len(te)) == (7, 0, 0)
        tr, va, te = split_indices(np.zeros(19, dtype=int), 1, SplitSpec())
        assert (len(tr), len(va), len(te)) == (17, 1, 1)

    def test_same_seed_same_assignment(self):
        labels = np.repeat(np.arange(5), 13)
        a = split_indices(labels, 5, SplitSpec(seed=3))
        b = split_indices(labels, 5, SplitSpec(seed=3))
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(3, 40), min_size=1, max_size=6), st.integers(0, 2**63 - 1))
    def test_partition(self, counts, seed):
        labels = np.random.default_rng(0).permutation(np.repeat(np.arange(len(counts)), counts))
        parts = split_indices(labels, len(counts), SplitSpec(seed=seed))
        joined = np.concatenate(parts)
        assert len(joined) == len(labels)
        assert sorted(joined.tolist()) == list(range(len(labels)))

    def test_small_class_listed(self):
        ds = _dataset([5, 2])
        with pytest.raises(DatasetError, match="c1"):
            stratified_split(ds, SplitSpec())

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValueError):
            SplitSpec(0.8, 0.1, 0.2)


class TestSynth:
    def test_shape_and_balance(self):
        ds = synth_dataset(4, 16, (32, 32), seed=7)
        assert len(ds) == 64
        assert ds.class_counts().tolist() == [16] * 4
        assert ds.images.min() >= 0 and ds.images.max() <= 1

    def test_deterministic(self):
        assert synth_dataset(3, 5, seed=2).images.tobytes() == synth_dataset(3, 5, seed=2).images.tobytes()

    def test_seed_matters(self):
        assert synth_dataset(3, 5, seed=2).images.tobytes() != synth_dataset(3, 5, seed=3).images.tobytes()


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(DatasetError):
        LabeledDataset(np.zeros((2, 2, 2, 1), dtype=np.float32), np.array([0, 2]), ["a", "b"])
