import gzip
import struct

import numpy as np
import pytest

from gated_pixelcnn.data import (
    CIFAR_RECORD,
    Dataset,
    FormatError,
    dequantize,
    downsample,
    encode_idx,
    load_cifar_binary,
    load_idx,
    load_mnist,
    make_synthetic,
    parse_idx,
    quantize,
    read_png,
    stripe_orientation,
    tile_grid,
    write_digits_standin,
    write_idx,
    write_png_grid,
)


# IDX


def _idx_images(n, h, w, fill):
    return struct.pack(">IIII", 0x803, n, h, w) + bytes(fill(i) for i in range(n * h * w))


def test_idx_handmade_fixture(tmp_path):
    raw = _idx_images(2, 3, 4, lambda i: i * 7 % 256)
    (tmp_path / "imgs").write_bytes(raw)
    arr = load_idx(tmp_path / "imgs")
    assert arr.shape == (2, 1, 3, 4) and arr.dtype == np.uint8
    assert arr[1, 0, 2, 3] == (23 * 7) % 256
    assert arr[0, 0, 0, 1] == 7


def test_idx_labels_and_gzip(tmp_path):
    raw = struct.pack(">II", 0x801, 3) + bytes([4, 0, 9])
    (tmp_path / "lbl.gz").write_bytes(gzip.compress(raw))
    assert load_idx(tmp_path / "lbl.gz").tolist() == [4, 0, 9]


@pytest.mark.parametrize("dtype", ["u1", "i1", ">i2", ">i4", ">f4", ">f8"])
def test_idx_round_trip(tmp_path, dtype):
    arr = (np.arange(24).reshape(2, 3, 4) - 5).astype(dtype)
    if dtype == "u1":
        arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    write_idx(arr, tmp_path / "x")
    back = load_idx(tmp_path / "x")[:, 0]
    assert np.array_equal(back, arr)
    assert encode_idx(back[:, None]) == (tmp_path / "x").read_bytes()


def test_idx_bad_magic_names_offset():
    raw = struct.pack(">IIII", 0x0103, 1, 1, 1) + b"\x00"
    with pytest.raises(FormatError, match="offset 0"):
        parse_idx(raw)


def test_idx_truncated():
    raw = _idx_images(2, 2, 2, lambda i: 1)[:-1]
    with pytest.raises(FormatError, match="offset 16"):
        parse_idx(raw)
    with pytest.raises(FormatError):
        parse_idx(b"\x00\x00")
    with pytest.raises(FormatError):
        parse_idx(struct.pack(">I", 0x803) + b"\x00\x00")


def test_idx_unsupported_dtype():
    with pytest.raises(FormatError):
        encode_idx(np.zeros(3, dtype=np.uint16))


def test_load_mnist_counts_and_quantization(tmp_path):
    imgs = np.arange(2 * 28 * 28, dtype=np.int64).reshape(2, 28, 28) % 256
    write_idx(imgs.astype(np.uint8), tmp_path / "train-images-idx3-ubyte")
    write_idx(np.array([3, 7], dtype=np.uint8), tmp_path / "train-labels-idx1-ubyte")
    ds = load_mnist(tmp_path, "train", levels=4)
    assert ds.images.shape == (2, 1, 28, 28) and ds.labels.tolist() == [3, 7]
    assert np.array_equal(ds.images[:, 0], imgs // 64)
    small = load_mnist(tmp_path, "train", levels=4, size=14)
    assert small.images.shape == (2, 1, 14, 14)
    write_idx(np.array([3], dtype=np.uint8), tmp_path / "train-labels-idx1-ubyte")
    with pytest.raises(FormatError):
        load_mnist(tmp_path, "train")
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path, "test")


def test_downsample_block_average():
    img = np.array([[10, 20, 0, 0], [30, 41, 0, 255], [1, 1, 1, 1], [1, 1, 1, 2]], dtype=np.uint8)
    out = downsample(img[None, None], 2)[0, 0]
    assert out.tolist() == [[25, 63], [1, 1]]
    with pytest.raises(ValueError):
        downsample(img[None, None], 3)


def test_digits_standin(tmp_path):
    pytest.importorskip("sklearn")
    write_digits_standin(tmp_path, size=14)
    train = load_mnist(tmp_path, "train", levels=4)
    test = load_mnist(tmp_path, "test", levels=4)
    assert train.images.shape[1:] == (1, 14, 14)
    assert len(train) + len(test) == 1797
    assert 0.15 < len(test) / 1797 < 0.25


# CIFAR


def test_cifar_handmade_record(tmp_path):
    rec = bytearray(CIFAR_RECORD * 2)
    rec[0] = 6
    rec[1] = 200  # R at (0, 0)
    rec[1 + 1024] = 100  # G at (0, 0)
    rec[1 + 2048 + 33] = 50  # B at (1, 1)
    rec[CIFAR_RECORD] = 9
    (tmp_path / "data_batch_1.bin").write_bytes(bytes(rec))
    ds = load_cifar_binary(tmp_path / "data_batch_1.bin")
    assert ds.labels.tolist() == [6, 9]
    assert ds.images.shape == (2, 3, 32, 32)
    assert ds.images[0, 0, 0, 0] == 200 and ds.images[0, 1, 0, 0] == 100 and ds.images[0, 2, 1, 1] == 50
    assert ds.images[0].sum() == 350
    q = load_cifar_binary(tmp_path / "data_batch_1.bin", levels=4)
    assert q.images[0, 0, 0, 0] == 3 and q.images[0, 1, 0, 0] == 1


def test_cifar_bad_length(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"\x00" * (CIFAR_RECORD + 5))
    with pytest.raises(FormatError):
        load_cifar_binary(tmp_path / "bad.bin")


# quantization


def test_quantize_bins():
    assert quantize([0, 63, 64, 127, 128, 255], 4).tolist() == [0, 0, 1, 1, 2, 3]
    assert np.array_equal(quantize(np.arange(256), 256), np.arange(256))
    assert dequantize([0, 1, 2, 3], 4).tolist() == [32, 96, 160, 224]


@pytest.mark.parametrize("levels", [2, 4, 8, 16, 256])
def test_quantize_dequantize_round_trip(levels):
    q = np.arange(levels)
    assert np.array_equal(quantize(dequantize(q, levels), levels), q)
    raw = np.arange(256)
    assert np.abs(dequantize(quantize(raw, levels), levels).astype(int) - raw).max() <= 256 // levels // 2


def test_quantize_rejects_bad_levels():
    for bad in (1, 3, 512):
        with pytest.raises(ValueError):
            quantize([0], bad)


# datasets and synthetic corpora


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 4, 4)), 4)
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1, 2, 2), 4), 4)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2)), 4, labels=[0])
    ds = Dataset(np.zeros((10, 1, 2, 2)), 4, labels=np.arange(10) % 3)
    assert ds.num_classes == 3
    tr, te = ds.split(0.2, seed=1)
    assert len(tr) == 8 and len(te) == 2
    assert sorted(set(tr.labels.tolist() + te.labels.tolist())) == [0, 1, 2]


def test_stripes_classifier_is_perfect_without_noise():
    ds = make_synthetic("stripes_hv", 400, noise=0.0, seed=3)
    assert np.array_equal(stripe_orientation(ds.images), ds.labels)
    assert abs(ds.labels.mean() - 0.5) < 1e-9


def test_stripes_classifier_robust_to_noise():
    ds = make_synthetic("stripes_hv", 400, seed=3)
    assert (stripe_orientation(ds.images) == ds.labels).mean() >= 0.99


def test_brightness_corpus():
    ds = make_synthetic("brightness_2class", 200, noise=0.0, levels=4)
    means = ds.images.mean(axis=(1, 2, 3))
    assert np.array_equal((means >= 1.5).astype(int), ds.labels)
    with pytest.raises(ValueError):
        make_synthetic("plaid", 2)


def test_synthetic_deterministic():
    a = make_synthetic("stripes_hv", 20, seed=9)
    b = make_synthetic("stripes_hv", 20, seed=9)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)


# PNG


@pytest.mark.parametrize("n,cols", [(16, 4), (5, 2), (3, 8), (1, 1)])
def test_png_grid_dims(tmp_path, n, cols):
    imgs = np.random.default_rng(0).integers(0, 256, (n, 1, 7, 5)).astype(np.uint8)
    h, w = write_png_grid(imgs, cols, tmp_path / "g.png")
    c = min(cols, n)
    rows = -(-n // c)
    assert (h, w) == (rows * 8 - 1, c * 6 - 1)
    assert read_png(tmp_path / "g.png").shape == (h, w)


def test_png_round_trip_rgb(tmp_path):
    imgs = np.random.default_rng(1).integers(0, 256, (4, 3, 6, 6)).astype(np.uint8)
    write_png_grid(imgs, 2, tmp_path / "rgb.png")
    back = read_png(tmp_path / "rgb.png")
    assert back.shape == (13, 13, 3)
    assert np.array_equal(back[7:13, 7:13].transpose(2, 0, 1), imgs[3])
    assert np.array_equal(back, tile_grid(imgs, 2))
    assert back[6].max() == 0 and back[:, 6].max() == 0
