"""Dataset ingestion and the desk-scale synthetic stand-in.

CIFAR-10 is read from its published binary layout: per record, one label
byte followed by 3072 channel-planar pixel bytes (R plane, G plane, B
plane, each row-major 32x32). The synthetic dataset emits images on the
same uint8 grid so a write/re-load round trip through that layout is
bit-exact.

Augmentation is deliberately small: pad-4 random crop plus horizontal
flip, then per-channel normalization with constants computed from the
training split.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR_RECORD_BYTES = 3073
CIFAR_IMAGE_BYTES = 3072
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


class DataFormatError(ValueError):
    """Malformed dataset file (missing, truncated, or invalid content)."""


@dataclass
class Split:
    """Images [N, C, S, S] float32 in [0, 1]; labels [N] int64."""
    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)


@dataclass
class DatasetMeta:
    n_train: int
    n_test: int
    n_classes: int
    mean: np.ndarray  # per channel
    std: np.ndarray
    source: str

    def __post_init__(self):
        if self.n_train <= 0 or self.n_test <= 0:
            raise DataFormatError("split sizes must be positive")
        if np.any(self.std <= 0):
            raise DataFormatError("per-channel std must be positive")


def _channel_stats(images):
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.maximum(std, 1e-3)  # degenerate constant channels
    return mean.astype(np.float32), std.astype(np.float32)


def _parse_cifar_file(path: Path):
    if not path.is_file():
        raise DataFormatError(f"{path}: file not found")
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES != 0:
        offset = (raw.size // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES
        raise DataFormatError(
            f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES} "
            f"(truncated record starts at offset {offset})"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        idx = int(bad[0])
        raise DataFormatError(
            f"{path}: label byte {int(labels[idx])} > 9 at offset {idx * CIFAR_RECORD_BYTES}"
        )
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels.astype(np.int64)


def load_cifar10(data_dir):
    """Load the binary-format CIFAR-10 train and test splits.

    Returns (train, test, meta); pixels scaled to [0, 1], normalization
    constants computed from the training split.
    """
    data_dir = Path(data_dir)
    train_parts = [_parse_cifar_file(data_dir / name) for name in CIFAR_TRAIN_FILES]
    train = Split(
        images=np.concatenate([p[0] for p in train_parts]),
        labels=np.concatenate([p[1] for p in train_parts]),
    )
    test_images, test_labels = _parse_cifar_file(data_dir / CIFAR_TEST_FILE)
    test = Split(images=test_images, labels=test_labels)
    mean, std = _channel_stats(train.images)
    meta = DatasetMeta(
        n_train=len(train), n_test=len(test), n_classes=10,
        mean=mean, std=std, source="cifar10",
    )
    return train, test, meta


def write_cifar10_binary(split: Split, path):
    """Write a split in the CIFAR-10 binary record layout.

    Pixels must already sit on the uint8 grid (multiples of 1/255), which
    both loaders and the synthetic generator guarantee, so the written
    bytes round-trip exactly.
    """
    images = np.round(split.images * 255.0).astype(np.uint8)
    n, c, h, w = images.shape
    records = np.empty((n, 1 + c * h * w), dtype=np.uint8)
    records[:, 0] = split.labels.astype(np.uint8)
    records[:, 1:] = images.reshape(n, -1)
    Path(path).write_bytes(records.tobytes())


# anchor positions (fractions of image side) for synthetic class patterns
_ANCHORS = [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75), (0.5, 0.5)]
_BACKGROUND = 26  # uint8, ~0.1
_FOREGROUND = 217  # uint8, ~0.85


# (outline anchor, block anchor) per class: five anchor pairs, each used in
# both orders. Swapped-order classes share every global statistic, so the
# label is only readable by binding shape identity to location.
_CLASS_PAIRS = [(0, 1), (1, 0), (2, 3), (3, 2), (4, 0),
                (0, 4), (1, 2), (2, 1), (3, 4), (4, 3)]


def _class_pair(cls):
    return _CLASS_PAIRS[cls % len(_CLASS_PAIRS)]


def _paint_class(canvas, cls, jitter, size):
    """Fill the class pattern in-place on a uint8 canvas.

    A hollow square outline sits at one anchor and a solid block of equal
    pixel mass at another. Equal mass and one shared foreground level keep
    both global color statistics and the brightness-weighted centroid
    uninformative: telling the outline location from the block location
    takes localized shape reading, not a global average. Components jitter
    independently by one pixel.
    """
    s = size
    outline_anchor, block_anchor = _class_pair(cls)
    half = max(2, int(round(s * 0.15)))
    yy, xx = np.mgrid[0:s, 0:s]

    ar, ac = _ANCHORS[outline_anchor]
    cy = int(round(ar * (s - 1))) + jitter[0]
    cx = int(round(ac * (s - 1))) + jitter[1]
    dy, dx = np.abs(yy - cy), np.abs(xx - cx)
    ring = (dy <= half) & (dx <= half) & ((dy == half) | (dx == half))
    canvas[:, ring] = _FOREGROUND

    br, bc = _ANCHORS[block_anchor]
    side = 2 * half  # matches the outline's pixel count: 8*half == (2*half)^2
    my = int(round(br * (s - 1))) - half + jitter[2]
    mx = int(round(bc * (s - 1))) - half + jitter[3]
    my = min(max(my, 0), s - side)
    mx = min(max(mx, 0), s - side)
    canvas[:, my:my + side, mx:mx + side] = _FOREGROUND


def make_synthetic(seed, n_per_class, n_classes, image_size, noise=0.05,
                   n_test_per_class=None):
    """Deterministic geometric-pattern classification set.

    Each class is a fixed shape at a fixed anchor with +/-1 pixel placement
    jitter and additive gaussian pixel noise, quantized to the uint8 grid.
    Low-noise variants are linearly separable. Returns (train, test, meta).
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    if n_test_per_class is None:
        n_test_per_class = max(1, n_per_class // 5)
    rng = np.random.default_rng([int(seed), 0x5D])

    def build(count_per_class):
        n = count_per_class * n_classes
        images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
        labels = np.empty(n, dtype=np.int64)
        for i in range(n):
            cls = i % n_classes
            canvas = np.full((3, image_size, image_size), _BACKGROUND, dtype=np.uint8)
            jitter = rng.integers(-1, 2, size=4)
            _paint_class(canvas, cls, jitter, image_size)
            img = canvas.astype(np.float32) / 255.0
            if noise > 0:
                img = img + rng.normal(0.0, noise, size=img.shape).astype(np.float32)
            img = np.clip(img, 0.0, 1.0)
            images[i] = np.round(img * 255.0).astype(np.uint8).astype(np.float32) / 255.0
            labels[i] = cls
        return Split(images=images, labels=labels)

    train = build(n_per_class)
    test = build(n_test_per_class)
    mean, std = _channel_stats(train.images)
    meta = DatasetMeta(
        n_train=len(train), n_test=len(test), n_classes=n_classes,
        mean=mean, std=std, source=f"synthetic(seed={seed})",
    )
    return train, test, meta


def augment_normalize(image, meta: DatasetMeta, rng=None, train_mode=False):
    """Model-ready image: optional crop/flip augmentation, then normalize.

    Train mode pads 4 pixels with zeros, crops back at a random offset and
    flips horizontally with p=0.5; eval mode only normalizes and ignores
    the rng entirely.
    """
    img = np.asarray(image, dtype=np.float32)
    if train_mode:
        pad = 4
        c, h, w = img.shape
        padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=np.float32)
        padded[:, pad:pad + h, pad:pad + w] = img
        top = int(rng.integers(0, 2 * pad + 1))
        left = int(rng.integers(0, 2 * pad + 1))
        img = padded[:, top:top + h, left:left + w]
        if rng.random() < 0.5:
            img = img[:, :, ::-1]
    out = (img - meta.mean[:, None, None]) / meta.std[:, None, None]
    return np.ascontiguousarray(out, dtype=np.float32)


def nearest_centroid_accuracy(train: Split, test: Split, n_classes):
    """Pixel-space nearest-centroid classifier; sanity floor for any model."""
    flat_train = train.images.reshape(len(train), -1)
    centroids = np.stack([
        flat_train[train.labels == c].mean(axis=0) for c in range(n_classes)
    ])
    flat = test.images.reshape(len(test), -1)
    d2 = ((flat[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    pred = d2.argmin(axis=1)
    return float((pred == test.labels).mean())
