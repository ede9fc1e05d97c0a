import gzip
import struct

import numpy as np
import numpy.testing as npt
import pytest

from mecaps.data import (CIFAR_RECORD, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC, SPECS,
                         batch_iter, load_split, parse_cifar10, parse_idx,
                         to_idx_bytes)
from mecaps.errors import DataFormatError


def idx_image_bytes(dims, pixels):
    return struct.pack(f">I{len(dims)}I", IDX_IMAGE_MAGIC, *dims) + bytes(pixels)


def idx_label_bytes(labels):
    return struct.pack(">II", IDX_LABEL_MAGIC, len(labels)) + bytes(labels)


class TestParseIdx:
    def test_handcrafted_image_file(self):
        # 18 bytes: magic, dims (1,1,2), pixels {0, 255}
        blob = idx_image_bytes((1, 1, 2), [0, 255])
        assert len(blob) == 18
        items, shape = parse_idx(blob)
        assert shape == (1, 2)
        npt.assert_array_equal(items, [[[0.0, 1.0]]])

    def test_handcrafted_label_file(self):
        items, shape = parse_idx(idx_label_bytes([0, 5, 9]))
        assert shape == ()
        npt.assert_array_equal(items, [0, 5, 9])

    def test_truncated_names_sizes(self):
        blob = idx_image_bytes((1, 2, 2), [7] * 4)[:-1]
        with pytest.raises(DataFormatError, match=r"expected 20 bytes, got 19"):
            parse_idx(blob)

    def test_bad_magic(self):
        with pytest.raises(DataFormatError, match="bad IDX magic"):
            parse_idx(struct.pack(">II", 0xDEADBEEF, 1))

    def test_unsupported_dtype_tag(self):
        # dtype byte 0x0D (float32) instead of 0x08 (uint8)
        with pytest.raises(DataFormatError, match="dtype tag"):
            parse_idx(struct.pack(">IIII", 0x00000D03, 1, 1, 1) + b"\x00\x00\x00\x00")

    def test_unsupported_rank(self):
        with pytest.raises(DataFormatError, match="dimensions"):
            parse_idx(struct.pack(">III", 0x00000802, 1, 1) + b"\x00")

    def test_round_trip(self, rng):
        images = (rng.integers(0, 256, (5, 4, 3)) / 255.0).astype(np.float64)
        again, shape = parse_idx(to_idx_bytes(images))
        assert shape == (4, 3)
        npt.assert_allclose(again, images, atol=1e-12)
        labels = np.array([3, 1, 9], dtype=np.int64)
        back, _ = parse_idx(to_idx_bytes(labels))
        npt.assert_array_equal(back, labels)


class TestParseCifar10:
    def test_single_record(self):
        blob = bytes([7]) + bytes([255] * 3072)
        images, labels = parse_cifar10(blob)
        npt.assert_array_equal(labels, [7])
        assert images.shape == (1, 3, 32, 32)
        npt.assert_array_equal(images, np.ones((1, 3, 32, 32)))

    def test_channel_plane_order(self):
        # R plane 255, G plane 128, B plane 0
        blob = bytes([2]) + bytes([255] * 1024 + [128] * 1024 + [0] * 1024)
        images, _ = parse_cifar10(blob)
        npt.assert_allclose(images[0, 0], 1.0)
        npt.assert_allclose(images[0, 1], 128 / 255.0)
        npt.assert_allclose(images[0, 2], 0.0)

    def test_empty_payload(self):
        images, labels = parse_cifar10(b"")
        assert len(images) == 0 and len(labels) == 0

    def test_wrong_length(self):
        with pytest.raises(DataFormatError, match="3073"):
            parse_cifar10(bytes(3072))

    def test_label_out_of_range(self):
        with pytest.raises(DataFormatError, match="label byte"):
            parse_cifar10(bytes([12]) + bytes(3072))


class TestBatchIter:
    def test_sizes_with_short_tail(self, rng):
        x = rng.normal((10, 1, 4, 4))
        y = np.arange(10) % 10
        sizes = [len(b.labels) for b in batch_iter(x, y, 3, seed=1, epoch=0)]
        assert sizes == [3, 3, 3, 1]

    def test_deterministic_in_seed_epoch(self, rng):
        x = rng.normal((16, 1, 2, 2))
        y = np.arange(16)
        first = [b.labels.tolist() for b in batch_iter(x, y, 5, seed=9, epoch=2)]
        second = [b.labels.tolist() for b in batch_iter(x, y, 5, seed=9, epoch=2)]
        assert first == second
        other = [b.labels.tolist() for b in batch_iter(x, y, 5, seed=9, epoch=3)]
        assert first != other

    def test_union_is_full_permutation(self, rng):
        x = rng.normal((12, 1, 2, 2))
        y = np.arange(12)
        seen = np.concatenate([b.labels for b in batch_iter(x, y, 5, seed=3, epoch=1)])
        assert sorted(seen.tolist()) == list(range(12))


class TestLoadSplit:
    def test_loads_synth_idx_gz(self, synth_data_dir, caplog):
        import logging
        with caplog.at_level(logging.WARNING):
            images, labels = load_split("mnist", synth_data_dir, "train")
        assert images.shape == (2048, 1, 28, 28)
        assert images.min() >= 0.0 and images.max() <= 1.0
        assert labels.min() >= 0 and labels.max() <= 9
        # desk-scale subset triggers a size warning, not a failure
        assert any("reference size" in r.message for r in caplog.records)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_split("mnist", tmp_path, "train")

    def test_cifar_batches(self, tmp_path, rng):
        d = tmp_path / "cifar10"
        d.mkdir()
        raw = rng.integers(0, 256, (4, CIFAR_RECORD)).astype(np.uint8)
        raw[:, 0] = [0, 3, 9, 1]
        (d / "data_batch_1.bin").write_bytes(raw[:2].tobytes())
        (d / "data_batch_2.bin").write_bytes(raw[2:].tobytes())
        (d / "test_batch.bin").write_bytes(gzip.compress(raw[:1].tobytes()) * 0
                                           + raw[:1].tobytes())
        images, labels = load_split("cifar10", tmp_path, "train")
        assert images.shape == (4, 3, 32, 32)
        npt.assert_array_equal(labels, [0, 3, 9, 1])
        images, labels = load_split("cifar10", tmp_path, "test")
        assert images.shape == (1, 3, 32, 32)

    def test_specs_reference_sizes(self):
        for spec in SPECS.values():
            assert spec.classes == 10
            assert spec.test_size == 10000
            assert spec.train_size == 50000
        assert SPECS["mnist"].image_shape == (1, 28, 28)
        assert SPECS["cifar10"].image_shape == (3, 32, 32)
