"""Dataset readers (IDX, CIFAR-10 binary), quantization, synthetic corpora, PNG grids."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np


class FormatError(ValueError):
    """A dataset file does not match its declared binary format."""


@dataclass
class Dataset:
    images: np.ndarray  # int64 levels, [N, C, H, W]
    levels: int
    labels: Optional[np.ndarray] = None
    num_classes: int = 0
    embeddings: Optional[np.ndarray] = None  # [N, d] conditioning vectors, if supplied

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError("images must be [N, C, H, W]")
        if self.images.size and (self.images.min() < 0 or self.images.max() >= self.levels):
            raise ValueError(f"image levels must lie in [0, {self.levels})")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise ValueError("labels and images differ in length")
            if self.num_classes == 0:
                self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError("label out of range")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, idx) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        emb = None if self.embeddings is None else self.embeddings[idx]
        return Dataset(self.images[idx], self.levels, labels, self.num_classes, emb)

    def split(self, holdout: float = 0.2, seed: int = 0):
        """Deterministic (train, test) split."""
        perm = np.random.Generator(np.random.PCG64(seed)).permutation(len(self))
        n_test = max(1, int(round(len(self) * holdout)))
        return self.subset(np.sort(perm[n_test:])), self.subset(np.sort(perm[:n_test]))


# ---------------------------------------------------------------------------
# IDX

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803


def _read_bytes(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError("truncated IDX header at offset 0")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES or ndim == 0:
        raise FormatError(f"bad IDX magic 0x{raw[:4].hex()} at offset 0")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"truncated IDX header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dt = np.dtype(_IDX_DTYPES[dtype_code])
    need = int(np.prod(dims)) * dt.itemsize
    if len(raw) - header != need:
        raise FormatError(f"IDX payload is {len(raw) - header} bytes at offset {header}, expected {need}")
    return np.frombuffer(raw, dtype=dt, offset=header).reshape(dims)


def load_idx(path) -> np.ndarray:
    """Read an IDX file. Image files (3 dims) come back as ``[N, 1, H, W]`` uint8."""
    arr = parse_idx(_read_bytes(path))
    if arr.ndim == 3:
        arr = arr[:, None, :, :]
    return arr.astype(arr.dtype.newbyteorder("="))


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_DTYPES.items()}
    code = codes.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"dtype {arr.dtype} cannot be stored as IDX")
    head = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.astype(_IDX_DTYPES[code]).tobytes()


def write_idx(arr: np.ndarray, path):
    with open(path, "wb") as f:
        f.write(encode_idx(arr))


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / name).exists():
            return directory / name
    raise FileNotFoundError(f"{stem} not found in {directory}")


def downsample(image8: np.ndarray, size: int) -> np.ndarray:
    """Block-average ``[N, C, H, W]`` 8-bit images down to ``size`` x ``size``."""
    n, c, h, w = image8.shape
    if h == size and w == size:
        return image8
    if h % size or w % size:
        raise ValueError(f"cannot downsample {h}x{w} to {size}x{size} by whole blocks")
    fy, fx = h // size, w // size
    blocks = np.asarray(image8, dtype=np.float64).reshape(n, c, size, fy, size, fx)
    return np.floor(blocks.mean(axis=(3, 5))).astype(np.uint8)


def load_mnist(directory, split: str = "train", levels: int = 256, size: Optional[int] = None) -> Dataset:
    """MNIST-style IDX pair; ``size`` block-averages the images (28 -> 14 for the desk preset)."""
    directory = Path(directory)
    img_name, lbl_name = MNIST_FILES[split]
    images = load_idx(_find(directory, img_name))
    labels = load_idx(_find(directory, lbl_name))
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    if size is not None:
        images = downsample(images, size)
    q = quantize(images, levels)
    return Dataset(q, levels, labels.astype(np.int64), num_classes=10)


def write_digits_standin(directory, size: int = 14, holdout: float = 0.2, seed: int = 0):
    """Write scikit-learn's bundled 8x8 handwritten digits, resized to ``size`` x ``size``,
    as MNIST-named IDX files. Used where the real MNIST files are not available.
    """
    from PIL import Image
    from sklearn.datasets import load_digits

    digits = load_digits()
    raw = np.clip(digits.images * (255.0 / 16.0), 0, 255).astype(np.uint8)
    big = np.stack([
        np.asarray(Image.fromarray(im).resize((size, size), Image.BILINEAR)) for im in raw
    ])
    labels = digits.target.astype(np.uint8)
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(len(big))
    n_test = int(round(len(big) * holdout))
    test, train = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", train), ("test", test)):
        img_name, lbl_name = MNIST_FILES[split]
        write_idx(big[idx], directory / img_name)
        write_idx(labels[idx], directory / lbl_name)
    return directory


# ---------------------------------------------------------------------------
# CIFAR-10 binary

CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar_binary(path, levels: int = 256) -> Dataset:
    """Records of one label byte then R, G and B planes (32x32 each, row-major)."""
    raw = _read_bytes(path)
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"CIFAR file length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return Dataset(quantize(images, levels), levels, labels, num_classes=10)


# ---------------------------------------------------------------------------
# Quantization


def _check_levels(levels: int):
    if levels < 2 or levels > 256 or 256 % levels:
        raise ValueError(f"levels must divide 256 and lie in [2, 256], got {levels}")


def quantize(image8, levels: int) -> np.ndarray:
    """8-bit values to levels: ``floor(value * L / 256)``."""
    _check_levels(levels)
    return (np.asarray(image8, dtype=np.int64) * levels) // 256


def dequantize(image_levels, levels: int) -> np.ndarray:
    """Levels back to the 8-bit centre of each bin."""
    _check_levels(levels)
    width = 256 // levels
    return (np.asarray(image_levels, dtype=np.int64) * width + width // 2).astype(np.uint8)


# ---------------------------------------------------------------------------
# Synthetic corpora


def stripe_orientation(images: np.ndarray) -> np.ndarray:
    """Reference classifier: 0 for horizontal bars, 1 for vertical bars."""
    x = np.asarray(images, dtype=np.float64)
    within_rows = x.var(axis=-1).mean(axis=(1, 2))
    within_cols = x.var(axis=-2).mean(axis=(1, 2))
    return (within_rows > within_cols).astype(np.int64)


def make_synthetic(kind: str, n: int, dims=(8, 8), seed: int = 0, levels: int = 4,
                   noise: float = 0.03) -> Dataset:
    """Labelled two-class corpora.

    ``stripes_hv``: class 0 has horizontal bars (constant rows), class 1 vertical
    bars; bars alternate between two distinct levels, each one or two pixels
    thick with a random phase. ``brightness_2class``: class 0 draws levels from
    the lower half, class 1 from the upper half. In both, a ``noise`` fraction
    of pixels is replaced by a uniform random level.
    """
    h, w = dims
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = np.arange(n) % 2
    labels = labels[rng.permutation(n)]
    images = np.empty((n, 1, h, w), dtype=np.int64)
    if kind == "stripes_hv":
        for k in range(n):
            lo, hi = rng.choice(levels, size=2, replace=False)
            thick = int(rng.integers(1, 3))
            phase = int(rng.integers(0, 2 * thick))
            span = w if labels[k] else h
            bars = np.where(((np.arange(span) + phase) // thick) % 2 == 0, lo, hi)
            images[k, 0] = np.tile(bars, (h, 1)) if labels[k] else np.tile(bars[:, None], (1, w))
    elif kind == "brightness_2class":
        half = levels // 2
        for k in range(n):
            lo = half if labels[k] else 0
            images[k, 0] = rng.integers(lo, lo + half, size=(h, w))
    else:
        raise ValueError(f"unknown synthetic corpus {kind!r}")
    flip = rng.random(images.shape) < noise
    images[flip] = rng.integers(0, levels, size=int(flip.sum()))
    return Dataset(images, levels, labels, num_classes=2)


# ---------------------------------------------------------------------------
# PNG output


def tile_grid(images8: np.ndarray, columns: int) -> np.ndarray:
    """Row-major tiling with a one-pixel zero separator; returns [H, W] or [H, W, 3]."""
    imgs = np.asarray(images8, dtype=np.uint8)
    n, c, h, w = imgs.shape
    columns = max(1, min(columns, n))
    rows = -(-n // columns)
    canvas = np.zeros((rows * (h + 1) - 1, columns * (w + 1) - 1, c), dtype=np.uint8)
    for k in range(n):
        r, col = divmod(k, columns)
        canvas[r * (h + 1):r * (h + 1) + h, col * (w + 1):col * (w + 1) + w] = imgs[k].transpose(1, 2, 0)
    return canvas[:, :, 0] if c == 1 else canvas


def write_png_grid(images8: np.ndarray, columns: int, path) -> tuple:
    """Write 8-bit images ``[N, C, H, W]`` as one PNG; returns its (height, width)."""
    from PIL import Image

    grid = tile_grid(images8, columns)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(grid).save(path, format="PNG")
    return grid.shape[:2]


def read_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im)
