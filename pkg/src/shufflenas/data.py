"""CIFAR-10 binary reader, normalization, augmentation and synthetic image sets."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073
RECORDS_PER_FILE = 10000
FILE_BYTES = RECORD_BYTES * RECORDS_PER_FILE
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"
VAL_SIZE = 5000
CLASS_NAMES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")
DATA_DIR_ENV = "SHUFFLENAS_DATA_DIR"

PAD = 4
CUTOUT_SIZE = 16


@dataclass
class Dataset:
    images: np.ndarray  # count x 32 x 32 x 3, uint8 RGB
    labels: np.ndarray  # count, int64
    split: str

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[3] != 3:
            raise ValueError(f"images must be count x H x W x 3, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, count: int, split: str | None = None) -> "Dataset":
        return Dataset(self.images[:count], self.labels[:count], split or self.split)


def parse_records(blob: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    """Decode label byte + 1024 R + 1024 G + 1024 B records (row-major planes)."""
    if len(blob) % RECORD_BYTES:
        raise ValueError(f"{source}: {len(blob)} bytes is not a whole number of {RECORD_BYTES}-byte records")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"{source}: record {bad} has label {labels[bad]} > 9")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def _read_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise FileNotFoundError(f"missing CIFAR-10 file {path}")
    size = path.stat().st_size
    if size != FILE_BYTES:
        raise ValueError(f"{path}: expected {FILE_BYTES} bytes, found {size}")
    return parse_records(path.read_bytes(), str(path))


def load_cifar10(directory) -> tuple[Dataset, Dataset, Dataset]:
    """Read the binary CIFAR-10 batches into 45000 train / 5000 val / 10000 test.

    Validation is the last 5000 training records in file order.
    """
    directory = Path(directory)
    parts = [_read_file(directory / name) for name in TRAIN_FILES]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    test_images, test_labels = _read_file(directory / TEST_FILE)
    cut = len(labels) - VAL_SIZE
    return (
        Dataset(images[:cut], labels[:cut], "train"),
        Dataset(images[cut:], labels[cut:], "val"),
        Dataset(test_images, test_labels, "test"),
    )


def default_data_dir() -> str | None:
    return os.environ.get(DATA_DIR_ENV)


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray  # per RGB channel, [0, 1] scale
    std: np.ndarray


def channel_stats(ds: Dataset) -> ChannelStats:
    x = ds.images.reshape(-1, 3).astype(np.float64) / 255.0
    return ChannelStats(x.mean(axis=0), x.std(axis=0))


def normalize(images: np.ndarray, stats: ChannelStats, dtype=np.float32) -> np.ndarray:
    """uint8 ``count x H x W x 3`` -> float ``count x 3 x H x W``, per-channel standardized."""
    if np.any(stats.std <= 0):
        raise ValueError(f"cannot normalize with zero standard deviation {stats.std}")
    x = images.astype(np.float64) / 255.0
    x = (x - stats.mean) / stats.std
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=dtype)


# ---------------------------------------------------------------------------
# augmentation


def cutout_mask(size: int, cy: int, cx: int, side: int = CUTOUT_SIZE) -> np.ndarray:
    """Boolean mask of the ``side`` square centred at (cy, cx), clipped at the border."""
    mask = np.zeros((size, size), dtype=bool)
    half = side // 2
    mask[max(cy - half, 0):min(cy + half, size), max(cx - half, 0):min(cx + half, size)] = True
    return mask


def augment_one(img: np.ndarray, dy: int, dx: int, flip: bool, cutout_center: tuple[int, int] | None) -> np.ndarray:
    """Pad by 4 with zeros, crop at (dy, dx), optionally flip and cut out. ``img`` is C x H x W."""
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (PAD, PAD), (PAD, PAD)))
    out = padded[:, dy:dy + h, dx:dx + w]
    if flip:
        out = out[:, :, ::-1]
    out = out.copy()
    if cutout_center is not None:
        out[:, cutout_mask(h, *cutout_center)] = 0
    return out


def augment(batch: np.ndarray, rng: np.random.Generator, cutout: bool = False) -> np.ndarray:
    """Random crop (81 offsets), horizontal flip with p=0.5, optional Cutout.

    Works on normalized ``N x C x H x W`` batches, so zero fill equals the
    channel mean.
    """
    n, _, h, w = batch.shape
    offsets = rng.integers(0, 2 * PAD + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    centers = rng.integers(0, h, size=(n, 2)) if cutout else None
    out = np.empty_like(batch)
    for i in range(n):
        center = (int(centers[i, 0]), int(centers[i, 1])) if cutout else None
        out[i] = augment_one(batch[i], int(offsets[i, 0]), int(offsets[i, 1]), bool(flips[i]), center)
    return out


def iterate_batches(count: int, batch_size: int, rng: np.random.Generator | None = None):
    """Yield index arrays covering ``range(count)``, shuffled when ``rng`` is given."""
    order = rng.permutation(count) if rng is not None else np.arange(count)
    for start in range(0, count, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# synthetic data

SYNTHETIC_KINDS = ("two_gaussians_images", "striped_patterns")


def synthetic_dataset(kind: str, n: int, rng: np.random.Generator, split: str = "train",
                      num_classes: int | None = None) -> Dataset:
    """Labelled 32x32 RGB images with known class structure.

    ``two_gaussians_images``: two classes whose mean images are +/- a fixed
    random template around mid-gray, plus i.i.d. Gaussian pixel noise
    (sigma 30).  Linearly separable with overwhelming margin.

    ``striped_patterns``: class k picks a stripe orientation (horizontal,
    vertical, two diagonals) and a spatial period (4 or 8 pixels); each
    image has a random phase, random tint and pixel noise.  Needs spatial
    filters to classify; default 4 classes, at most 8.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    if kind == "two_gaussians_images":
        classes = 2
    else:
        classes = num_classes or 4
        if not 2 <= classes <= 8:
            raise ValueError(f"striped_patterns supports 2..8 classes, got {classes}")
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    size = 32
    if kind == "two_gaussians_images":
        template = np.random.default_rng(12345).choice([-1.0, 1.0], size=(size, size, 3))
        sign = np.where(labels == 0, 1.0, -1.0)[:, None, None, None]
        x = 128 + 40 * sign * template + rng.normal(0, 30, size=(n, size, size, 3))
    else:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        directions = [(1, 0), (0, 1), (1, 1), (1, -1)]
        x = np.empty((n, size, size, 3))
        phases = rng.uniform(0, 2 * np.pi, n)
        tints = rng.uniform(0.5, 1.0, (n, 3))
        for i, k in enumerate(labels):
            dy, dx = directions[k % 4]
            period = 4 if k < 4 else 8
            wave = np.sin(2 * np.pi * (dy * yy + dx * xx) / period + phases[i])
            x[i] = 128 + 80 * wave[:, :, None] * tints[i]
        x += rng.normal(0, 25, size=x.shape)
    images = np.clip(np.rint(x), 0, 255).astype(np.uint8)
    return Dataset(images, labels, split)
