import os

import numpy as np
import pytest

from gradrep import ops
from gradrep.autodiff import Parameter, Tensor
from gradrep.data import (
    CIFAR10_RECORD,
    DatasetHandle,
    augment_images,
    gen_synthetic,
    iter_batches,
    load_cifar,
    load_cifar_file,
    write_cifar10,
)
from gradrep.errors import ConfigError, DataFormatError
from gradrep.rng import Rng


def make_cifar10_bytes(records):
    """records: list of (label, fill_fn(channel, row, col) -> byte value)."""
    out = bytearray()
    for label, fill in records:
        out.append(label)
        for ch in range(3):
            for r in range(32):
                for c in range(32):
                    out.append(fill(ch, r, c) & 0xFF)
    return bytes(out)


class TestCifarParsing:
    def test_two_record_file_exact_bytes(self, tmp_path):
        recs = [
            (3, lambda ch, r, c: ch * 10 + r),
            (9, lambda ch, r, c: 255 - c),
        ]
        path = tmp_path / "batch.bin"
        path.write_bytes(make_cifar10_bytes(recs))
        images, labels = load_cifar_file(str(path), "cifar10")
        assert labels.tolist() == [3, 9]
        assert images.shape == (2, 3, 32, 32)
        assert images[0, 2, 5, 31] == 2 * 10 + 5
        assert images[0, 0, 0, 0] == 0
        assert images[1, 1, 7, 4] == 255 - 4

    def test_truncated_file_names_lengths(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"\x00" * (CIFAR10_RECORD + 17))
        with pytest.raises(DataFormatError) as err:
            load_cifar_file(str(path), "cifar10")
        msg = str(err.value)
        assert str(CIFAR10_RECORD + 17) in msg and str(CIFAR10_RECORD) in msg

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.bin"
        path.write_bytes(b"")
        with pytest.raises(DataFormatError):
            load_cifar_file(str(path), "cifar10")

    def test_label_out_of_range_names_offset(self, tmp_path):
        raw = bytearray(make_cifar10_bytes([(1, lambda *_: 0), (1, lambda *_: 0)]))
        raw[CIFAR10_RECORD] = 12  # second record's label byte
        path = tmp_path / "bad_label.bin"
        path.write_bytes(bytes(raw))
        with pytest.raises(DataFormatError) as err:
            load_cifar_file(str(path), "cifar10")
        assert "record 1" in str(err.value) and str(CIFAR10_RECORD) in str(err.value)

    def test_cifar100_uses_fine_label(self, tmp_path):
        out = bytearray()
        out.append(7)  # coarse
        out.append(42)  # fine
        out.extend(bytes(range(256)) * 12)  # 3072 pixel bytes
        path = tmp_path / "c100.bin"
        path.write_bytes(bytes(out))
        images, labels = load_cifar_file(str(path), "cifar100")
        assert labels.tolist() == [42]
        assert images[0, 0, 0, 5] == 5

    def test_directory_aggregation(self, tmp_path):
        for i in (1, 2):
            (tmp_path / f"data_batch_{i}.bin").write_bytes(
                make_cifar10_bytes([(i, lambda *_: i)] * 3)
            )
        handle = load_cifar(str(tmp_path), "cifar10", split="train")
        assert len(handle) == 6
        assert handle.labels.tolist() == [1, 1, 1, 2, 2, 2]

    def test_missing_directory_files(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_cifar(str(tmp_path), "cifar10", split="test")

    @pytest.mark.skipif("GRADREP_CIFAR10" not in os.environ,
                        reason="real CIFAR-10 binaries not mounted")
    def test_real_train_split_has_50000_records(self):
        handle = load_cifar(os.environ["GRADREP_CIFAR10"], "cifar10", split="train")
        assert len(handle) == 50000

    def test_write_then_load_roundtrip_bit_exact(self, tmp_path):
        ds = gen_synthetic(20, 32, 10, seed=5)
        path = tmp_path / "synthetic_as_cifar.bin"
        write_cifar10(ds, str(path))
        back = load_cifar(str(path), "cifar10")
        assert back.images.tobytes() == ds.images.tobytes()
        assert back.labels.tolist() == ds.labels.tolist()

    def test_write_rejects_wrong_resolution(self, tmp_path):
        ds = gen_synthetic(4, 16, 10, seed=0)
        with pytest.raises(ConfigError):
            write_cifar10(ds, str(tmp_path / "x.bin"))


class TestSynthetic:
    def test_same_seed_identical_bytes(self):
        a = gen_synthetic(32, 16, 10, seed=9)
        b = gen_synthetic(32, 16, 10, seed=9)
        assert a.images.tobytes() == b.images.tobytes()
        assert a.labels.tolist() == b.labels.tolist()

    def test_different_seed_differs(self):
        a = gen_synthetic(32, 16, 10, seed=9)
        b = gen_synthetic(32, 16, 10, seed=10)
        assert a.images.tobytes() != b.images.tobytes()

    def test_zero_samples_rejected(self):
        with pytest.raises(ConfigError):
            gen_synthetic(0, 16, 10, seed=0)

    def test_linear_probe_beats_chance(self):
        # 10-class blobs must be separable: linear model, 5 epochs, > 50%.
        ds = gen_synthetic(512, 16, 10, seed=3)
        rng = Rng(0)
        d = 3 * 16 * 16
        w = Parameter(0.01 * rng.gaussian((10, d)), name="w")
        b = Parameter(np.zeros(10), name="b")
        order_rng = Rng(1)
        for _ in range(5):
            for idx in np.array_split(order_rng.permutation(len(ds)), 8):
                x = Tensor(ds.normalized(idx).reshape(len(idx), d))
                loss = ops.cross_entropy(ops.linear(x, w, b), ds.labels[idx])
                w.grad = None
                b.grad = None
                loss.backward()
                w.data -= 0.05 * w.grad
                b.data -= 0.05 * b.grad
        logits = ops.linear(Tensor(ds.normalized().reshape(len(ds), d)), w, b)
        acc = (np.argmax(logits.data, axis=1) == ds.labels).mean()
        assert acc > 0.5


class TestBatching:
    def test_normalization_formula(self):
        ds = gen_synthetic(4, 8, 2, seed=1)
        x = ds.normalized()
        mean = np.asarray(ds.norm_mean).reshape(1, 3, 1, 1)
        std = np.asarray(ds.norm_std).reshape(1, 3, 1, 1)
        np.testing.assert_allclose(x * std + mean, ds.images / 255.0, atol=1e-12)

    def test_batches_cover_dataset_in_order_without_rng(self):
        ds = gen_synthetic(10, 8, 2, seed=1)
        labels = np.concatenate([lab for _, lab in iter_batches(ds, 4)])
        np.testing.assert_array_equal(labels, ds.labels)

    def test_shuffle_deterministic(self):
        ds = gen_synthetic(32, 8, 2, seed=1)

        def run():
            return np.concatenate(
                [lab for _, lab in iter_batches(ds, 8, rng=Rng(5))]
            )

        np.testing.assert_array_equal(run(), run())

    def test_drop_last(self):
        ds = gen_synthetic(10, 8, 2, seed=1)
        batches = list(iter_batches(ds, 4, drop_last=True))
        assert len(batches) == 2

    def test_augment_deterministic_and_shape(self):
        ds = gen_synthetic(8, 16, 2, seed=2)
        x = ds.normalized()
        a = augment_images(x, Rng(7))
        b = augment_images(x, Rng(7))
        assert a.shape == x.shape
        assert a.tobytes() == b.tobytes()

    def test_subset_bounds(self):
        ds = gen_synthetic(10, 8, 2, seed=1)
        assert len(ds.subset(4, offset=2)) == 4
        with pytest.raises(ConfigError):
            ds.subset(20)

    def test_handle_validation(self):
        with pytest.raises(DataFormatError):
            DatasetHandle("synthetic", np.zeros((0, 3, 8, 8), dtype=np.uint8),
                          np.zeros(0, dtype=np.int64), 10)
        with pytest.raises(DataFormatError):
            DatasetHandle("synthetic", np.zeros((2, 3, 8, 8), dtype=np.uint8),
                          np.zeros(3, dtype=np.int64), 10)
