import gzip
import struct

import numpy as np
import pytest

from reduced_precision.data import (
    BadMagicError,
    Dataset,
    DimensionMismatchError,
    TruncatedFileError,
    batches,
    load_idx_images,
    load_idx_labels,
)


def write_idx(path, magic, dims, body, compress=False):
    raw = struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(body)
    if compress:
        raw = gzip.compress(raw)
    path.write_bytes(raw)
    return path


def test_single_image_normalization(tmp_path):
    pixels = [0] * 784
    pixels[28 * 3 + 5] = 255
    pixels[0] = 51
    p = write_idx(tmp_path / "img", 0x803, (1, 28, 28), pixels)
    img = load_idx_images(p)
    assert img.shape == (1, 28, 28) and img.dtype == np.float32
    assert img[0, 3, 5] == 1.0
    assert img[0, 0, 0] == np.float32(0.2)
    assert img.sum() == np.float32(1.2)


def test_gzip_accepted(tmp_path):
    p = write_idx(tmp_path / "lbl.gz", 0x801, (3,), [7, 0, 9], compress=True)
    assert load_idx_labels(p).tolist() == [7, 0, 9]


@pytest.mark.parametrize("magic", [0x00000000, 0x801])
def test_bad_magic(tmp_path, magic):
    p = write_idx(tmp_path / "img", magic, (1, 2, 2), [0] * 4)
    with pytest.raises(BadMagicError, match="magic"):
        load_idx_images(p)


def test_truncated(tmp_path):
    p = write_idx(tmp_path / "img", 0x803, (2, 2, 2), [0] * 5)
    with pytest.raises(TruncatedFileError):
        load_idx_images(p)
    (tmp_path / "short").write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedFileError):
        load_idx_labels(tmp_path / "short")


def test_trailing_bytes(tmp_path):
    p = write_idx(tmp_path / "lbl", 0x801, (2,), [1, 2, 3])
    with pytest.raises(DimensionMismatchError):
        load_idx_labels(p)


def test_dataset_count_mismatch():
    with pytest.raises(DimensionMismatchError):
        Dataset(np.zeros((3, 28, 28), np.float32), np.zeros(2, np.int64))


def toy(n):
    return Dataset(np.arange(n, dtype=np.float32).reshape(n, 1, 1), np.arange(n) % 10)


def test_batch_sizes_and_permutation():
    ds = toy(10)
    got = list(batches(ds, 4, seed=0, epoch=0))
    assert [len(x) for x, _ in got] == [4, 4, 2]
    seen = np.concatenate([x.ravel() for x, _ in got])
    assert sorted(seen.tolist()) == list(range(10))
    for x, t in got:
        assert t.shape == (len(x), 10)
        assert np.array_equal(t.argmax(1), x.ravel().astype(int) % 10)


def test_batches_deterministic_and_epoch_dependent():
    ds = toy(50)
    a = [x.ravel().tolist() for x, _ in batches(ds, 8, 3, 1)]
    b = [x.ravel().tolist() for x, _ in batches(ds, 8, 3, 1)]
    c = [x.ravel().tolist() for x, _ in batches(ds, 8, 3, 2)]
    assert a == b and a != c
    with pytest.raises(ValueError):
        next(batches(ds, 0, 0, 0))


def test_real_mnist_headers(mnist_dir):
    # header fields read independently of the loader
    raw = (mnist_dir / "train-images-idx3-ubyte").read_bytes()[:16]
    assert struct.unpack(">4I", raw) == (0x803, 60000, 28, 28)
    raw = (mnist_dir / "t10k-labels-idx1-ubyte").read_bytes()[:8]
    assert struct.unpack(">2I", raw) == (0x801, 10000)


def test_real_mnist_load(mnist_train, mnist_test):
    assert mnist_train.images.shape == (60000, 28, 28)
    assert mnist_test.images.shape == (10000, 28, 28)
    assert 0.0 <= mnist_train.images.min() and mnist_train.images.max() == 1.0
    assert set(np.unique(mnist_test.labels)) == set(range(10))
    # full-size permutation covers every sample, shuffles differ across epochs
    from reduced_precision.data import epoch_order

    o0, o1 = epoch_order(60000, 0, 0), epoch_order(60000, 0, 1)
    assert np.array_equal(np.sort(o0), np.arange(60000))
    assert not np.array_equal(o0, o1)
