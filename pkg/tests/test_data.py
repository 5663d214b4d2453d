import numpy as np
import pytest

from vperceiver.data import (
    CIFAR_RECORD_BYTES, DataFormatError, DatasetMeta, Split,
    augment_normalize, load_cifar10, make_synthetic,
    nearest_centroid_accuracy, write_cifar10_binary,
)


def _record(label, seed):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=3072, dtype=np.uint8)
    return bytes([label]) + pixels.tobytes(), pixels


def _write_dataset(tmp_path, per_file_records):
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        blobs = []
        for label, seed in per_file_records[name]:
            blob, _ = _record(label, seed)
            blobs.append(blob)
        (tmp_path / name).write_bytes(b"".join(blobs))


class TestLoadCifar10:
    def test_fixture_exact_pixels(self, tmp_path):
        records = {f"data_batch_{i}.bin": [(i % 10, 100 + i), (9, 200 + i)]
                   for i in range(1, 6)}
        records["test_batch.bin"] = [(3, 300), (0, 301)]
        _write_dataset(tmp_path, records)
        train, test, meta = load_cifar10(tmp_path)
        assert len(train) == 10 and len(test) == 2
        assert meta.n_train == 10 and meta.n_test == 2 and meta.n_classes == 10

        _, pixels = _record(1, 101)
        expected = pixels.reshape(3, 32, 32).astype(np.float32) / 255.0
        np.testing.assert_array_equal(train.images[0], expected)
        assert train.labels[0] == 1 and train.labels[1] == 9
        assert test.labels.tolist() == [3, 0]
        assert train.images.min() >= 0.0 and train.images.max() <= 1.0

    def test_truncated_file(self, tmp_path):
        records = {f"data_batch_{i}.bin": [(0, i)] for i in range(1, 6)}
        records["test_batch.bin"] = [(0, 99)]
        _write_dataset(tmp_path, records)
        (tmp_path / "data_batch_2.bin").write_bytes(b"\x00" * 3072)
        with pytest.raises(DataFormatError, match=r"data_batch_2.*offset 0"):
            load_cifar10(tmp_path)

    def test_truncated_trailing_record(self, tmp_path):
        records = {f"data_batch_{i}.bin": [(0, i)] for i in range(1, 6)}
        records["test_batch.bin"] = [(0, 99)]
        _write_dataset(tmp_path, records)
        path = tmp_path / "test_batch.bin"
        path.write_bytes(path.read_bytes() + b"\x01\x02")
        with pytest.raises(DataFormatError, match=rf"offset {CIFAR_RECORD_BYTES}"):
            load_cifar10(tmp_path)

    def test_label_out_of_range(self, tmp_path):
        records = {f"data_batch_{i}.bin": [(0, i)] for i in range(1, 6)}
        records["test_batch.bin"] = [(0, 99)]
        _write_dataset(tmp_path, records)
        blob, _ = _record(200, 7)
        (tmp_path / "data_batch_3.bin").write_bytes(blob)
        with pytest.raises(DataFormatError, match=r"label byte 200"):
            load_cifar10(tmp_path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError, match="not found"):
            load_cifar10(tmp_path)


class TestSynthetic:
    def test_same_seed_identical(self):
        a = make_synthetic(9, 8, 4, 16)
        b = make_synthetic(9, 8, 4, 16)
        np.testing.assert_array_equal(a[0].images, b[0].images)
        np.testing.assert_array_equal(a[0].labels, b[0].labels)
        np.testing.assert_array_equal(a[1].images, b[1].images)

    def test_different_seed_differs(self):
        a = make_synthetic(1, 8, 4, 16)
        b = make_synthetic(2, 8, 4, 16)
        assert not np.array_equal(a[0].images, b[0].images)

    def test_noise_zero_identical_up_to_jitter(self):
        train, _, _ = make_synthetic(3, 16, 4, 16, noise=0.0)
        # only placement jitter remains: per-class pattern mass varies by at
        # most the marker area (components may touch at extreme offsets)
        for cls in range(4):
            imgs = train.images[train.labels == cls]
            counts = sorted((img > 0.5).sum() for img in imgs)
            # extreme jitters can make the two components touch
            assert counts[-1] - counts[0] <= 3 * 8
        values = np.unique(np.round(train.images * 255).astype(int))
        assert set(values.tolist()) <= {26, 217}

    def test_two_class_nearest_centroid(self):
        train, test, _ = make_synthetic(4, 50, 2, 16, noise=0.05)
        assert nearest_centroid_accuracy(train, test, 2) >= 0.99

    def test_labels_and_range(self):
        train, test, meta = make_synthetic(5, 6, 10, 16)
        for split in (train, test):
            assert split.labels.min() >= 0 and split.labels.max() <= 9
            assert split.images.min() >= 0.0 and split.images.max() <= 1.0
        assert meta.n_classes == 10
        assert np.all(meta.std > 0)

    def test_ten_distinct_classes(self):
        train, _, _ = make_synthetic(6, 4, 10, 16, noise=0.0)
        # class patterns must differ pairwise (position or shape)
        protos = [train.images[train.labels == c][0] for c in range(10)]
        for a in range(10):
            for b in range(a + 1, 10):
                assert not np.array_equal(protos[a], protos[b])


class TestRoundTrip:
    def test_binary_round_trip_bit_exact(self, tmp_path):
        train, test, _ = make_synthetic(7, 10, 10, 32, noise=0.05)
        chunks = np.array_split(np.arange(len(train)), 5)
        for i, chunk in enumerate(chunks, start=1):
            write_cifar10_binary(
                Split(images=train.images[chunk], labels=train.labels[chunk]),
                tmp_path / f"data_batch_{i}.bin")
        write_cifar10_binary(test, tmp_path / "test_batch.bin")
        train2, test2, _ = load_cifar10(tmp_path)
        assert train.images.tobytes() == train2.images.tobytes()
        assert train.labels.tolist() == train2.labels.tolist()
        assert test.images.tobytes() == test2.images.tobytes()
        assert test.labels.tolist() == test2.labels.tolist()


class TestAugmentNormalize:
    meta = DatasetMeta(n_train=10, n_test=5, n_classes=2,
                       mean=np.array([0.4, 0.5, 0.6], np.float32),
                       std=np.array([0.2, 0.25, 0.3], np.float32),
                       source="synthetic(seed=0)")

    def test_eval_mode_rng_independent(self):
        rng_a, rng_b = np.random.default_rng(1), np.random.default_rng(999)
        img = np.random.default_rng(0).random((3, 16, 16), dtype=np.float32)
        out_a = augment_normalize(img, self.meta, rng_a, train_mode=False)
        out_b = augment_normalize(img, self.meta, rng_b, train_mode=False)
        out_c = augment_normalize(img, self.meta, train_mode=False)
        np.testing.assert_array_equal(out_a, out_b)
        np.testing.assert_array_equal(out_a, out_c)

    def test_mean_image_maps_to_zero(self):
        img = np.broadcast_to(self.meta.mean[:, None, None], (3, 16, 16))
        out = augment_normalize(img, self.meta, train_mode=False)
        np.testing.assert_allclose(out, 0.0, atol=1e-7)

    def test_train_mode_seeded_reproducible(self):
        img = np.random.default_rng(2).random((3, 16, 16), dtype=np.float32)
        out_a = augment_normalize(img, self.meta, np.random.default_rng(5), True)
        out_b = augment_normalize(img, self.meta, np.random.default_rng(5), True)
        np.testing.assert_array_equal(out_a, out_b)

    def test_shape_preserved(self):
        img = np.random.default_rng(3).random((3, 16, 16), dtype=np.float32)
        out = augment_normalize(img, self.meta, np.random.default_rng(0), True)
        assert out.shape == img.shape and out.dtype == np.float32

    def test_train_mode_actually_augments(self):
        img = np.random.default_rng(4).random((3, 16, 16), dtype=np.float32)
        eval_out = augment_normalize(img, self.meta, train_mode=False)
        seen_change = any(
            not np.array_equal(
                augment_normalize(img, self.meta, np.random.default_rng(s), True),
                eval_out)
            for s in range(8))
        assert seen_change


class TestDatasetMeta:
    def test_rejects_nonpositive_std(self):
        with pytest.raises(DataFormatError):
            DatasetMeta(n_train=1, n_test=1, n_classes=2,
                        mean=np.zeros(3), std=np.zeros(3), source="x")

    def test_rejects_empty_split(self):
        with pytest.raises(DataFormatError):
            DatasetMeta(n_train=0, n_test=1, n_classes=2,
                        mean=np.zeros(3), std=np.ones(3), source="x")
