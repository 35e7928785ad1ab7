"""Datasets: IDX / CIFAR binary loaders, preprocessing, augmentation, synthetic blobs."""
from __future__ import annotations

import gzip
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Tuple

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


class DatasetNotFound(DatasetError, FileNotFoundError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray  # (N, H, W, C) float64
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    name: str = "dataset"
    norm_mean: Optional[np.ndarray] = None
    norm_std: Optional[np.ndarray] = None

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(self.x_train.shape[1:])

    def validate(self) -> None:
        for x, y in ((self.x_train, self.y_train), (self.x_test, self.y_test)):
            if x.ndim != 4 or len(x) != len(y):
                raise DatasetError("images must be (N, H, W, C) with one label each")
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise DatasetError(f"labels outside [0, {self.n_classes})")
        if self.x_train.shape[1:] != self.x_test.shape[1:]:
            raise DatasetError("train and test image shapes differ")

    def subset(self, n_train: Optional[int] = None, n_test: Optional[int] = None) -> "Dataset":
        return replace(self, x_train=self.x_train[:n_train], y_train=self.y_train[:n_train],
                       x_test=self.x_test[:n_test], y_test=self.y_test[:n_test])


# --- IDX ----------------------------------------------------------------------

def _open(path):
    path = Path(path)
    if not path.exists():
        raise DatasetNotFound(f"dataset not found: {path}")
    return path.read_bytes() if path.suffix != ".gz" else gzip.decompress(path.read_bytes())


def read_idx(path) -> np.ndarray:
    """Parse one IDX file (unsigned-byte payload) into an array."""
    raw = _open(path)
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated at byte offset {len(raw)} (header)")
    magic = int.from_bytes(raw[:4], "big")
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise DatasetError(f"{path}: bad magic number 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated at byte offset {len(raw)} (dimensions)")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    need = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) < need:
        raise DatasetError(f"{path}: truncated at byte offset {len(raw)}, expected {need} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need - header, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    if array.ndim not in (1, 3):
        raise ValueError("IDX writer handles image stacks (3-d) and label vectors (1-d)")
    head = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    Path(path).write_bytes(head + array.tobytes())


def load_idx(images_path, labels_path) -> Tuple[np.ndarray, np.ndarray]:
    """Images (N, H, W) and labels (N,) from an IDX pair, both uint8."""
    images, labels = read_idx(images_path), read_idx(labels_path)
    if images.ndim != 3:
        raise DatasetError(f"{images_path}: expected an image file (magic 0x{IDX_IMAGES_MAGIC:08x})")
    if labels.ndim != 1:
        raise DatasetError(f"{labels_path}: expected a label file (magic 0x{IDX_LABELS_MAGIC:08x})")
    if len(images) != len(labels):
        raise DatasetError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    return images, labels


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise DatasetNotFound(f"dataset not found: {directory / stem}")


def load_mnist_dir(directory, n_classes: int = 10, name: str = "mnist") -> Dataset:
    """MNIST-family layout: train-images-idx3-ubyte etc., optionally gzipped."""
    d = Path(directory)
    if not d.is_dir():
        raise DatasetNotFound(f"dataset not found: {d}")
    xtr, ytr = load_idx(_find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte"))
    xte, yte = load_idx(_find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte"))
    ds = Dataset(xtr[..., None].astype(np.float64), ytr.astype(np.int64),
                 xte[..., None].astype(np.float64), yte.astype(np.int64), n_classes, name)
    ds.validate()
    return ds


def load_cifar_batches(directory, n_classes: int = 10, name: str = "cifar10") -> Dataset:
    """CIFAR binary batches: label byte(s) then 3x32x32 channel-major pixels.

    The 10-class layout is data_batch_*.bin + test_batch.bin with one label
    byte; the 100-class layout is train.bin + test.bin with a coarse and a fine
    label byte, of which the fine one is used.
    """
    d = Path(directory)
    if n_classes == 100:
        train_files, test_file, label_bytes = [d / "train.bin"], d / "test.bin", 2
    else:
        train_files, test_file, label_bytes = sorted(d.glob("data_batch_*.bin")), d / "test_batch.bin", 1
    if not train_files or not all(f.exists() for f in (*train_files, test_file)):
        raise DatasetNotFound(f"dataset not found: {d}")
    record = label_bytes + 3072

    def read(path):
        raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        if raw.size % record:
            raise DatasetError(f"{path}: size {raw.size} is not a multiple of {record}")
        rec = raw.reshape(-1, record)
        images = rec[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
        return images, rec[:, label_bytes - 1].astype(np.int64)

    parts = [read(f) for f in train_files]
    xte, yte = read(test_file)
    ds = Dataset(np.concatenate([p[0] for p in parts]).astype(np.float64),
                 np.concatenate([p[1] for p in parts]), xte.astype(np.float64), yte, n_classes, name)
    ds.validate()
    return ds


def data_root(explicit=None) -> Optional[Path]:
    root = explicit or os.environ.get("RESBUILDER_DATA_DIR")
    return Path(root) if root else None


# --- preprocessing ---------------------------------------------------------------

def scale01(ds: Dataset) -> Dataset:
    for x in (ds.x_train, ds.x_test):
        if x.size and (x.min() < 0 or x.max() > 255):
            raise DatasetError("pixel values must lie in [0, 255]")
    return replace(ds, x_train=ds.x_train / 255.0, x_test=ds.x_test / 255.0)


def normalize_meanstd(ds: Dataset) -> Dataset:
    """Per-channel standardisation with constants from the training split."""
    axes = (0, 1, 2)
    mean = ds.x_train.mean(axis=axes)
    std = ds.x_train.std(axis=axes)
    if np.any(std == 0):
        raise DatasetError(f"zero standard deviation in channel(s) {np.nonzero(std == 0)[0].tolist()}")
    return replace(ds, x_train=(ds.x_train - mean) / std, x_test=(ds.x_test - mean) / std,
                   norm_mean=mean, norm_std=std)


def shift_image(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate with zero fill."""
    h, w = img.shape[:2]
    out = np.zeros_like(img)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def augment(batch: np.ndarray, rng: np.random.Generator, shift: float = 0.1, flip: bool = True,
            draws: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None) -> np.ndarray:
    """Independent per-image shift (uniform integer offset up to round(shift*dim))
    and horizontal flip with probability 1/2. ``draws`` = (dy, dx, flip) overrides
    the random draws."""
    n, h, w = batch.shape[:3]
    my, mx = int(round(shift * h)), int(round(shift * w))
    if draws is None:
        dy = rng.integers(-my, my + 1, size=n)
        dx = rng.integers(-mx, mx + 1, size=n)
        fl = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    else:
        dy, dx, fl = draws
    out = np.empty_like(batch)
    for i in range(n):
        img = batch[i, :, ::-1] if fl[i] else batch[i]
        out[i] = shift_image(img, int(dy[i]), int(dx[i])) if (dy[i] or dx[i]) else img
    return out


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# --- synthetic ---------------------------------------------------------------

def synthetic_blobs(n_classes: int, n_per_class: int, size: int = 12, rng=None, channels: int = 1,
                    noise: float = 0.3, test_per_class: Optional[int] = None, name: str = "synthetic") -> Dataset:
    """Each class is a random smooth template plus Gaussian pixel noise.

    Templates are well separated, so classes are linearly separable with high
    probability at the default noise level.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    test_per_class = n_per_class // 4 if test_per_class is None else test_per_class
    coarse = rng.normal(size=(n_classes, 4, 4, channels))
    up = np.repeat(np.repeat(coarse, int(np.ceil(size / 4)), axis=1), int(np.ceil(size / 4)), axis=2)
    templates = up[:, :size, :size, :]

    def draw(k):
        labels = np.repeat(np.arange(n_classes), k)
        x = templates[labels] + noise * rng.normal(size=(len(labels), size, size, channels))
        perm = rng.permutation(len(labels))
        return x[perm], labels[perm]

    xtr, ytr = draw(n_per_class)
    xte, yte = draw(test_per_class)
    return Dataset(xtr, ytr.astype(np.int64), xte, yte.astype(np.int64), n_classes, name)


def load_bundled_mnist(n_test: int = 1000, seed: int = 0) -> Dataset:
    """The 5 000-digit MNIST sample shipped with mlxtend, split with a seeded
    per-class shuffle (the file is sorted by label)."""
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise DatasetNotFound("dataset not found: bundled MNIST sample needs the 'mlxtend' package") from exc
    x, y = mnist_data()
    y = y.astype(np.int64)
    rng = np.random.default_rng(seed)
    per_class = n_test // 10
    test_idx, train_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.nonzero(y == c)[0])
        test_idx.append(idx[:per_class])
        train_idx.append(idx[per_class:])
    tr = rng.permutation(np.concatenate(train_idx))
    te = rng.permutation(np.concatenate(test_idx))
    images = x.reshape(-1, 28, 28, 1).astype(np.float64)
    ds = Dataset(images[tr], y[tr], images[te], y[te], 10, "mnist_bundled")
    ds.validate()
    return ds


DATASET_DIRS = {
    "mnist": ("mnist", 10),
    "fashion_mnist": ("fashion_mnist", 10),
    "emnist": ("emnist", 47),
    "cifar10": ("cifar10", 10),
    "cifar100": ("cifar100", 100),
}
DEFAULT_PREPROCESS = {"mnist": "scale01", "fashion_mnist": "scale01", "emnist": "scale01",
                      "mnist_bundled": "scale01", "cifar10": "meanstd", "cifar100": "meanstd",
                      "synthetic": "none"}


def load_named(name: str, root=None, n_train: int = 0, n_test: int = 0, preprocess: str = "auto",
               synthetic: Optional[dict] = None) -> Dataset:
    """Load a dataset by name from ``root`` (or RESBUILDER_DATA_DIR), subset it,
    and apply the preprocessing for its family.

    Files live in ``<root>/<name>/``; ``root`` may also point directly at that
    directory.
    """
    if name == "synthetic":
        opts = dict(synthetic or {})
        seed = opts.pop("seed", 0)
        ds = synthetic_blobs(rng=np.random.default_rng(seed), **opts)
    elif name == "mnist_bundled":
        ds = load_bundled_mnist()
    elif name in DATASET_DIRS:
        base = data_root(root)
        if base is None:
            raise DatasetNotFound(f"dataset not found: {name} (no --data and RESBUILDER_DATA_DIR unset)")
        sub, q = DATASET_DIRS[name]
        directory = base / sub if (base / sub).is_dir() else base
        if name.startswith("cifar"):
            ds = load_cifar_batches(directory, q, name)
        else:
            ds = load_mnist_dir(directory, q, name)
    else:
        raise DatasetError(f"unknown dataset {name!r}")
    ds = ds.subset(n_train or None, n_test or None)
    mode = DEFAULT_PREPROCESS[name] if preprocess == "auto" else preprocess
    if mode == "scale01":
        ds = scale01(ds)
    elif mode == "meanstd":
        ds = normalize_meanstd(ds)
    elif mode != "none":
        raise DatasetError(f"unknown preprocessing {mode!r}")
    return ds
