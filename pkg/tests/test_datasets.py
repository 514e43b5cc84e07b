import gzip
import struct

import numpy as np
import pytest

from composer.datasets import (
    LabeledDataset,
    batch_indices,
    batch_iterator,
    load_idx,
    load_mnist,
    make_wide_mnist,
    read_idx,
    side_bits,
    write_idx,
)
from composer.errors import DataError

from conftest import MNIST_DIR, needs_mnist


def fake_mnist(count=300, seed=0):
    rng = np.random.default_rng(seed)
    px = rng.integers(1, 256, (count, 28, 28), dtype=np.uint8)
    return LabeledDataset(px, rng.integers(0, 10, count), 10, "fake")


def test_idx_round_trip(tmp_path):
    ds = fake_mnist(50)
    write_idx(ds, tmp_path / "img", tmp_path / "lab")
    back = load_idx(tmp_path / "img", tmp_path / "lab")
    np.testing.assert_array_equal(back.pixels, ds.pixels)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert len((tmp_path / "img").read_bytes()) == 16 + 50 * 784
    assert back.provenance["images_sha256"]


def test_idx_gzip(tmp_path):
    ds = fake_mnist(10)
    write_idx(ds, tmp_path / "img", tmp_path / "lab")
    (tmp_path / "img.gz").write_bytes(gzip.compress((tmp_path / "img").read_bytes()))
    np.testing.assert_array_equal(read_idx(tmp_path / "img.gz"), ds.pixels)


def test_idx_errors(tmp_path):
    ds = fake_mnist(10)
    write_idx(ds, tmp_path / "img", tmp_path / "lab")
    raw = (tmp_path / "img").read_bytes()
    for name, data in {
        "trunc": raw[:-1], "long": raw + b"\0", "magic": struct.pack(">I", 1234) + raw[4:],
        "header": raw[:10], "empty": b"",
    }.items():
        (tmp_path / name).write_bytes(data)
        with pytest.raises(DataError):
            read_idx(tmp_path / name)
    with pytest.raises(DataError):
        read_idx(tmp_path / "absent")
    with pytest.raises(DataError):
        load_idx(tmp_path / "lab", tmp_path / "img")


def test_label_count_mismatch(tmp_path):
    write_idx(fake_mnist(10), tmp_path / "img", tmp_path / "lab")
    write_idx(fake_mnist(9), tmp_path / "img9", tmp_path / "lab9")
    with pytest.raises(DataError):
        load_idx(tmp_path / "img", tmp_path / "lab9")


def test_missing_mnist_has_download_hint(tmp_path):
    with pytest.raises(DataError, match="Download"):
        load_mnist(tmp_path, "train")


@needs_mnist
def test_official_mnist_files():
    train = load_mnist(MNIST_DIR, "train")
    assert len(train) == 60000 and train.shape == (28, 28)
    assert train.labels.min() >= 0 and train.labels.max() < 10
    test = load_mnist(MNIST_DIR, "test")
    assert len(test) == 10000


def test_wide_mnist_properties():
    src = fake_mnist(2000)
    wide = make_wide_mnist(src, 7)
    assert wide.shape == (28, 56) and wide.num_classes == 20
    left = wide.labels < 10
    assert np.all(wide.pixels[left, :, 28:] == 0)
    assert np.all(wide.pixels[~left, :, :28] == 0)
    np.testing.assert_array_equal(wide.labels % 10, src.labels)
    np.testing.assert_array_equal(wide.pixels[left, :, :28], src.pixels[left])
    # class histogram identity
    np.testing.assert_array_equal(
        np.bincount(wide.labels[left], minlength=10), np.bincount(src.labels[left], minlength=10)
    )
    again = make_wide_mnist(src, 7)
    assert again.pixels.tobytes() == wide.pixels.tobytes()
    assert not np.array_equal(make_wide_mnist(src, 8).labels, wide.labels)


def test_side_bits_fair():
    bits = side_bits(3, 60000)
    assert abs(bits.mean() - 0.5) <= 3 * np.sqrt(0.25 / 60000)
    np.testing.assert_array_equal(side_bits(3, 100), bits[:100])


def test_batch_indices():
    blocks = list(batch_indices(103, 10, 5))
    assert len(blocks) == 10
    flat = np.concatenate(blocks)
    assert len(np.unique(flat)) == 100
    np.testing.assert_array_equal(flat, np.concatenate(list(batch_indices(103, 10, 5))))
    assert not np.array_equal(flat, np.concatenate(list(batch_indices(103, 10, 6))))
    (only,) = list(batch_indices(20, 20, 0))
    np.testing.assert_array_equal(np.sort(only), np.arange(20))
    with pytest.raises(DataError):
        list(batch_indices(5, 6, 0))


def test_batch_iterator_scales_pixels():
    ds = fake_mnist(30)
    x, y = next(batch_iterator(ds, 8, 0))
    assert x.shape == (8, 784) and x.dtype == np.float64
    assert 0 <= x.min() and x.max() <= 1
    assert y.shape == (8,)


def test_dataset_validation():
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((2, 3, 3), np.uint8), [0, 10], 10)
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((2, 3, 3), np.uint8), [0], 10)
    with pytest.raises(DataError):
        LabeledDataset(np.full((1, 3, 3), 2.0), [0], 10)
