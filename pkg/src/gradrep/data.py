"""Dataset ingestion: bit-exact CIFAR binary parsing, a seeded synthetic
generator, normalization, augmentation and batch iteration.

CIFAR binary layout (one record per image, no headers):

* CIFAR-10: 1 label byte then 3072 image bytes (1024 R, 1024 G, 1024 B, each
  plane row-major 32x32).
* CIFAR-100: 2 label bytes (coarse then fine; the fine label is used) then the
  same 3072 image bytes.

Pixel normalization is pinned per source (README lists the constants) so that
accuracies are comparable across runs and implementations.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .rng import Rng

CIFAR_HW = 32
CIFAR10_RECORD = 1 + 3 * CIFAR_HW * CIFAR_HW
CIFAR100_RECORD = 2 + 3 * CIFAR_HW * CIFAR_HW

#: per-channel (mean, std) of pixel values scaled to [0, 1]
NORMALIZATION = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "synthetic": ((0.5, 0.5, 0.5), (0.25, 0.25, 0.25)),
}

CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]


@dataclass
class DatasetHandle:
    """In-memory dataset: uint8 images (n, 3, h, w) plus integer labels."""

    source: str
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    norm_mean: tuple = field(default=None)
    norm_std: tuple = field(default=None)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DataFormatError(f"images must be (n, 3, h, w), got {self.images.shape}")
        if len(self.images) == 0:
            raise DataFormatError("dataset has no records")
        if len(self.labels) != len(self.images):
            raise DataFormatError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if self.norm_mean is None:
            key = self.source if self.source in NORMALIZATION else "synthetic"
            self.norm_mean, self.norm_std = NORMALIZATION[key]

    def __len__(self):
        return len(self.images)

    @property
    def resolution(self) -> int:
        return self.images.shape[2]

    def normalized(self, idx=None) -> np.ndarray:
        """float64 images: (pixel/255 - mean) / std per channel."""
        imgs = self.images if idx is None else self.images[idx]
        x = imgs.astype(np.float64) / 255.0
        mean = np.asarray(self.norm_mean).reshape(1, 3, 1, 1)
        std = np.asarray(self.norm_std).reshape(1, 3, 1, 1)
        return (x - mean) / std

    def subset(self, n: int, offset: int = 0) -> "DatasetHandle":
        if offset + n > len(self):
            raise ConfigError(f"subset [{offset}:{offset + n}] exceeds {len(self)} records")
        return DatasetHandle(self.source, self.images[offset:offset + n],
                             self.labels[offset:offset + n], self.num_classes,
                             self.split, self.norm_mean, self.norm_std)


# ---------------------------------------------------------------------------
# CIFAR binary parsing
# ---------------------------------------------------------------------------

def _parse_records(raw: bytes, record_size: int, label_offset: int,
                   num_classes: int, path: str):
    if len(raw) == 0:
        raise DataFormatError(f"{path}: empty file")
    if len(raw) % record_size != 0:
        raise DataFormatError(
            f"{path}: length {len(raw)} is not a multiple of the {record_size}-byte "
            f"record (remainder {len(raw) % record_size} at offset "
            f"{len(raw) - len(raw) % record_size})"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record_size)
    labels = arr[:, label_offset].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        raise DataFormatError(
            f"{path}: record {bad[0]} has label {labels[bad[0]]} >= {num_classes} "
            f"(byte offset {bad[0] * record_size + label_offset})"
        )
    pixels = arr[:, label_offset + 1:].reshape(-1, 3, CIFAR_HW, CIFAR_HW)
    return pixels.copy(), labels


def load_cifar_file(path: str, variant: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR binary file into (images, labels)."""
    if variant == "cifar10":
        record, label_offset, classes = CIFAR10_RECORD, 0, 10
    elif variant == "cifar100":
        record, label_offset, classes = CIFAR100_RECORD, 1, 100
    else:
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    with open(path, "rb") as fh:
        raw = fh.read()
    return _parse_records(raw, record, label_offset, classes, path)


def load_cifar(path: str, variant: str = "cifar10", split: str = "train") -> DatasetHandle:
    """Load a CIFAR binary file or a directory holding the standard files.

    Directories are searched for the canonical batch names, then for
    train.bin/test.bin.
    """
    classes = 10 if variant == "cifar10" else 100
    if os.path.isdir(path):
        if variant == "cifar10":
            names = CIFAR10_TRAIN_FILES if split == "train" else CIFAR10_TEST_FILES
        else:
            names = ["train.bin"] if split == "train" else ["test.bin"]
        files = [os.path.join(path, n) for n in names]
        present = [f for f in files if os.path.exists(f)]
        if not present:
            fallback = os.path.join(path, f"{split}.bin")
            if os.path.exists(fallback):
                present = [fallback]
            else:
                raise DataFormatError(f"{path}: no {variant} {split} files found")
        files = present
    else:
        files = [path]
    images, labels = [], []
    for f in files:
        im, lab = load_cifar_file(f, variant)
        images.append(im)
        labels.append(lab)
    return DatasetHandle(variant, np.concatenate(images), np.concatenate(labels),
                         classes, split)


def write_cifar10(handle: DatasetHandle, path: str) -> None:
    """Write a dataset out in the CIFAR-10 binary record layout."""
    if handle.resolution != CIFAR_HW:
        raise ConfigError(
            f"CIFAR-10 layout is fixed at 32x32, dataset is {handle.resolution}"
        )
    if handle.num_classes > 256:
        raise ConfigError("CIFAR-10 layout stores labels in one byte")
    n = len(handle)
    out = np.empty((n, CIFAR10_RECORD), dtype=np.uint8)
    out[:, 0] = handle.labels.astype(np.uint8)
    out[:, 1:] = handle.images.reshape(n, -1)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(out.tobytes())


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def gen_synthetic(n: int, resolution: int, classes: int, seed: int, *,
                  jitter_frac: float = 0.125, noise: float = 0.18,
                  radius_spread: float = 0.3) -> DatasetHandle:
    """Class-structured Gaussian blobs, fully determined by the seed.

    Each class owns a blob position on a circle and a color; samples add
    position jitter, blob-size variation and pixel noise. The default knobs
    make desk-scale convnets work for their accuracy (tens of epochs of
    headroom) while a linear probe still clears chance comfortably.
    """
    if n <= 0:
        raise ConfigError(f"need n > 0 synthetic samples, got {n}")
    if classes <= 1 or resolution < 4:
        raise ConfigError(f"need classes > 1 and resolution >= 4, got {classes}, {resolution}")
    rng = Rng(seed)
    # class templates: center angle and color
    angles = 2.0 * np.pi * np.arange(classes) / classes
    radius = resolution / 3.5
    centers = np.stack([
        resolution / 2 + radius * np.cos(angles),
        resolution / 2 + radius * np.sin(angles),
    ], axis=1)
    colors = 0.35 + 0.5 * rng.uniform(classes * 3).reshape(classes, 3)
    labels = rng.integers_below(classes, n)
    yy, xx = np.meshgrid(np.arange(resolution), np.arange(resolution), indexing="ij")
    base_sigma = resolution / 6.0
    jitter = rng.gaussian((n, 2)) * (resolution * jitter_frac)
    sigmas = base_sigma * (1.0 + radius_spread * (rng.uniform(n) - 0.5) * 2.0)
    pixel_noise = rng.gaussian((n, 3, resolution, resolution)) * noise
    images = np.empty((n, 3, resolution, resolution), dtype=np.uint8)
    for i in range(n):
        cy, cx = centers[labels[i]] + jitter[i]
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigmas[i] ** 2)))
        img = colors[labels[i]][:, None, None] * blob[None] + 0.25 + pixel_noise[i]
        images[i] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return DatasetHandle("synthetic", images, labels, classes)


# ---------------------------------------------------------------------------
# batching and augmentation
# ---------------------------------------------------------------------------

def augment_images(x: np.ndarray, rng: Rng, pad: int = 4) -> np.ndarray:
    """Horizontal flip (p=0.5) plus pad-4 random crop on normalized images;
    all draws come from one stream in a fixed order (flips, dy, dx)."""
    n, c, h, w = x.shape
    flips = rng.uniform(n) < 0.5
    dy = rng.integers_below(2 * pad + 1, n)
    dx = rng.integers_below(2 * pad + 1, n)
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = x
    out = np.empty_like(x)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def iter_batches(handle: DatasetHandle, batch_size: int, rng: Rng | None = None,
                 augment: bool = False, drop_last: bool = False):
    """Yield (normalized images, labels); shuffled when an rng is given."""
    n = len(handle)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            return
        x = handle.normalized(idx)
        if augment:
            x = augment_images(x, rng)
        yield x, handle.labels[idx]
