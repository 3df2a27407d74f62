"""Dataset generators, binary batch IO, and epoch iteration."""

import numpy as np
import pytest

from coat import datasets
from coat.datasets import (BatchPlan, DatasetError, ImageDataset,
                           load_by_name, load_cifar10, make_cifar_surrogate,
                           make_synthetic, subsample, surrogate_pair,
                           write_binary)


class TestImageDataset:
    def test_shape_and_range_validation(self):
        good = np.zeros((3, 1, 4, 4))
        ImageDataset(good, np.zeros(3, dtype=int))
        with pytest.raises(DatasetError):
            ImageDataset(np.zeros((3, 4, 4)), np.zeros(3, dtype=int))
        with pytest.raises(DatasetError):
            ImageDataset(good, np.zeros(2, dtype=int))
        with pytest.raises(DatasetError):
            ImageDataset(good - 0.1, np.zeros(3, dtype=int))

    def test_label_counts_meta(self):
        ds = ImageDataset(np.zeros((4, 1, 2, 2)), np.array([0, 2, 2, 1]))
        assert ds.meta["label_counts"] == [1, 1, 2]


class TestBinaryIO:
    def pair(self, n_train=25, n_test=10):
        return surrogate_pair(n_train, n_test, seed=3)

    def test_round_trip_bit_identical(self, tmp_path):
        train, test = self.pair()
        write_binary(tmp_path, train, test, records_per_file=10)
        back_train, back_test = load_cifar10(tmp_path)
        assert np.array_equal(back_train.images, train.images)
        assert np.array_equal(back_train.labels, train.labels)
        assert np.array_equal(back_test.images, test.images)
        assert np.array_equal(back_test.labels, test.labels)
        assert sorted(p.name for p in tmp_path.glob("data_batch_*.bin")) == [
            "data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin"]

    def test_nested_layout_resolved(self, tmp_path):
        train, test = self.pair(12, 5)
        write_binary(tmp_path / "cifar-10-batches-bin", train, test)
        back_train, _ = load_cifar10(tmp_path)
        assert np.array_equal(back_train.images, train.images)

    def test_bad_label_byte_reports_offset(self, tmp_path):
        train, test = self.pair(12, 5)
        write_binary(tmp_path, train, test)
        path = tmp_path / "test_batch.bin"
        raw = bytearray(path.read_bytes())
        raw[2 * datasets.RECORD_BYTES] = 77  # label byte of record 2
        path.write_bytes(bytes(raw))
        with pytest.raises(DatasetError, match="record 2"):
            load_cifar10(tmp_path)

    def test_truncated_file_rejected(self, tmp_path):
        train, test = self.pair(12, 5)
        write_binary(tmp_path, train, test)
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(DatasetError, match="not a multiple"):
            load_cifar10(tmp_path)

    def test_missing_files_rejected(self, tmp_path):
        with pytest.raises(DatasetError, match="no data_batch"):
            load_cifar10(tmp_path)
        train, test = self.pair(12, 5)
        write_binary(tmp_path, train, test)
        (tmp_path / "test_batch.bin").unlink()
        with pytest.raises(DatasetError, match="test_batch.bin"):
            load_cifar10(tmp_path)

    def test_off_grid_pixels_refused(self, tmp_path):
        ds = ImageDataset(np.full((4, 3, 32, 32), 0.4567), np.zeros(4, dtype=int))
        with pytest.raises(DatasetError, match="lossy"):
            write_binary(tmp_path, ds, ds)

    def test_train_overflow_rejected(self, tmp_path):
        train, test = self.pair(25, 5)
        with pytest.raises(DatasetError, match="files"):
            write_binary(tmp_path, train, test, records_per_file=4)


class TestMakeSynthetic:
    def test_deterministic(self):
        a = make_synthetic(40, seed=5)
        b = make_synthetic(40, seed=5)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)
        c = make_synthetic(40, seed=6)
        assert not np.array_equal(a.images, c.images)

    def test_margin_holds_under_generating_directions(self):
        ds = make_synthetic(60, num_classes=4, seed=1, margin=0.1)
        rng = np.random.default_rng(1)
        d = ds.images[0].size
        basis, _ = np.linalg.qr(rng.standard_normal((d, 4)))
        flat = ds.images.reshape(len(ds), -1) - 0.5
        scores = flat @ basis
        # quantization moves each pixel < 1/510, shrinking margins a little
        slack = d / 510.0 ** 0.5  # loose; just rules out margin collapse
        for i in range(len(ds)):
            s = scores[i]
            top = s[ds.labels[i]]
            rest = np.delete(s, ds.labels[i])
            assert top - rest.max() >= 0.1 - 0.02

    def test_quantized_to_pixel_grid(self):
        ds = make_synthetic(20, seed=0)
        px = ds.images * 255.0
        assert np.allclose(px, np.rint(px), atol=1e-9)

    def test_argument_validation(self):
        with pytest.raises(DatasetError):
            make_synthetic(2, num_classes=4)
        with pytest.raises(DatasetError):
            make_synthetic(70, num_classes=65, side=8, channels=1)


class TestSurrogate:
    def test_deterministic_and_seed_sensitive(self):
        a = make_cifar_surrogate(30, seed=1)
        b = make_cifar_surrogate(30, seed=1)
        c = make_cifar_surrogate(30, seed=2)
        assert np.array_equal(a.images, b.images)
        assert np.array_equal(a.labels, b.labels)
        assert not np.array_equal(a.images, c.images)

    def test_label_noise_fraction(self):
        ds = make_cifar_surrogate(4000, seed=0)
        rate = ds.meta["label_noise"]
        assert rate == pytest.approx(0.35)
        # recover true labels by template correlation; the flipped-and-moved
        # fraction is noise * (K-1)/K
        centered = ds.images.reshape(len(ds), -1) - ds.images.reshape(
            len(ds), -1).mean(axis=1, keepdims=True)
        templates = self.template_bank()
        t_flat = templates.reshape(10, -1)
        true = np.argmax(centered @ t_flat.T, axis=1)
        mismatch = float((true != ds.labels).mean())
        assert 0.25 <= mismatch <= 0.38

    def template_bank(self):
        trng = np.random.default_rng(np.random.SeedSequence([7]))
        return np.stack([datasets._smooth_field(trng, 3.0) for _ in range(10)])

    def test_pair_shares_templates_and_cleans_test_labels(self):
        train, test = surrogate_pair(400, 400, seed=4)
        assert train.meta["template_seed"] == test.meta["template_seed"]
        assert train.meta["label_noise"] == pytest.approx(0.35)
        assert test.meta["label_noise"] == 0.0
        # same class structure on both halves: per-class mean images from the
        # two splits must correlate strongly for matching classes
        def class_means(ds):
            flat = ds.images.reshape(len(ds), -1)
            flat = flat - flat.mean(axis=1, keepdims=True)
            return np.stack([flat[ds.labels == k].mean(axis=0) for k in range(10)])
        mtr, mte = class_means(train), class_means(test)
        mtr /= np.linalg.norm(mtr, axis=1, keepdims=True)
        mte /= np.linalg.norm(mte, axis=1, keepdims=True)
        cross = mtr @ mte.T
        assert np.all(np.diag(cross) > 0.6)
        assert np.all(np.diag(cross) > cross.max(axis=1) - 1e-9)

    def test_unknown_override_rejected(self):
        with pytest.raises(DatasetError, match="unknown surrogate"):
            make_cifar_surrogate(10, seed=0, contrast=2.0)

    def test_pixel_grid_and_range(self):
        ds = make_cifar_surrogate(30, seed=9)
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        px = ds.images * 255.0
        assert np.allclose(px, np.rint(px), atol=1e-9)


class TestSubsample:
    def test_subset_and_determinism(self):
        ds = make_synthetic(50, seed=2)
        a = subsample(ds, 12, seed=3)
        b = subsample(ds, 12, seed=3)
        assert np.array_equal(a.images, b.images)
        assert len(a) == 12
        # every row of the subset appears in the parent
        flat = ds.images.reshape(len(ds), -1)
        for row in a.images.reshape(12, -1):
            assert (flat == row).all(axis=1).any()

    def test_too_large_rejected(self):
        ds = make_synthetic(10, seed=2)
        with pytest.raises(DatasetError):
            subsample(ds, 11)


class TestLoadByName:
    def test_synthetic_split(self):
        train, test = load_by_name("synthetic", {"n_train": 30, "n_test": 10})
        assert len(train) == 30 and len(test) == 10

    def test_surrogate_options_forwarded(self):
        train, test = load_by_name("surrogate", {"n_train": 20, "n_test": 10,
                                                 "signal": 0.1})
        assert train.meta["signal"] == pytest.approx(0.1)
        assert len(test) == 10

    def test_cifar10_requires_directory(self, monkeypatch):
        monkeypatch.delenv(datasets.DATA_DIR_ENV, raising=False)
        with pytest.raises(DatasetError, match=datasets.DATA_DIR_ENV):
            load_by_name("cifar10")

    def test_cifar10_round_trip_via_env(self, tmp_path, monkeypatch):
        train, test = surrogate_pair(12, 5, seed=1)
        write_binary(tmp_path, train, test)
        monkeypatch.setenv(datasets.DATA_DIR_ENV, str(tmp_path))
        back_train, back_test = load_by_name("cifar10")
        assert np.array_equal(back_train.images, train.images)
        assert len(back_test) == 5

    def test_unknown_name_rejected(self):
        with pytest.raises(DatasetError, match="unknown dataset"):
            load_by_name("imagenet")


class TestBatchPlan:
    def test_every_index_once_per_epoch(self):
        plan = BatchPlan(103, 16, seed=1)
        idx = plan.epoch_indices(4)
        assert sorted(idx.tolist()) == list(range(103))
        assert plan.batches_per_epoch() == 7

    def test_epochs_differ_but_replay_identically(self):
        plan = BatchPlan(50, 8, seed=1)
        assert not np.array_equal(plan.epoch_indices(0), plan.epoch_indices(1))
        assert np.array_equal(plan.epoch_indices(3), plan.epoch_indices(3))

    def test_no_shuffle_is_identity(self):
        plan = BatchPlan(20, 8, shuffle=False)
        assert np.array_equal(plan.epoch_indices(9), np.arange(20))

    def test_drop_last(self):
        plan = BatchPlan(20, 8, seed=0, drop_last=True)
        ds = make_synthetic(20, seed=1)
        sizes = [len(y) for _, y in plan.iter_epoch(ds, 0)]
        assert sizes == [8, 8]
        assert plan.batches_per_epoch() == 2

    def test_augmentation_keeps_shape_and_range(self):
        plan = BatchPlan(24, 8, seed=2, augment="pad-crop-flip")
        ds = make_synthetic(24, seed=1)
        batches = list(plan.iter_epoch(ds, 0))
        assert len(batches) == 3
        for x, y in batches:
            assert x.shape == (8, 1, 8, 8)
            assert x.min() >= 0.0 and x.max() <= 1.0
        # augmented pixels differ from the raw batch for at least one image
        raw = ds.images[plan.epoch_indices(0)[:8]]
        assert not np.array_equal(batches[0][0], raw)

    def test_bad_arguments_rejected(self):
        with pytest.raises(DatasetError):
            BatchPlan(10, 0)
        with pytest.raises(DatasetError):
            BatchPlan(10, 4, augment="cutout")
