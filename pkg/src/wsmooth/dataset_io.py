"""Dataset plumbing: IDX-format readers and writers, normalization of raw
intensity grids into unit-mass images, deterministic synthetic datasets for
desk-scale experiments, and CSV export."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .flow_domain import (
    GridImage,
    MultiChannelImage,
    NormalizationError,
    _as_float_grid,
)

# IDX magic numbers: unsigned-byte data, rank 3 for image stacks and rank 1
# for label vectors.
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """File does not look like the expected IDX record type."""


class IdxLengthError(ValueError):
    """File size disagrees with its own header."""


class PairingError(ValueError):
    """Image and label collections do not line up."""


class DegenerateImageError(ValueError):
    """Image with zero total mass cannot be normalized."""


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise IdxLengthError(f"truncated file: expected {count} bytes of {what}, got {len(data)}")
    return data


def _check_no_trailing(fh):
    if fh.read(1):
        raise IdxLengthError("trailing bytes after declared payload")


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image stack as a (N, rows, cols) uint8 array."""
    with open(path, "rb") as fh:
        magic, num, rows, cols = struct.unpack(">iiii", _read_exact(fh, 16, "header"))
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(f"bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")
        if num < 0 or rows < 0 or cols < 0:
            raise IdxFormatError(f"negative dimensions in header: {num} x {rows} x {cols}")
        payload = _read_exact(fh, num * rows * cols, "pixels")
        _check_no_trailing(fh)
    return np.frombuffer(payload, dtype=np.uint8).reshape(num, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    """Read an IDX label vector as a (N,) uint8 array."""
    with open(path, "rb") as fh:
        magic, num = struct.unpack(">ii", _read_exact(fh, 8, "header"))
        if magic != LABEL_MAGIC:
            raise IdxFormatError(f"bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")
        if num < 0:
            raise IdxFormatError(f"negative count in header: {num}")
        payload = _read_exact(fh, num, "labels")
        _check_no_trailing(fh)
    return np.frombuffer(payload, dtype=np.uint8)


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read a paired IDX image/label set, insisting the counts agree."""
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise PairingError(f"{len(images)} images but {len(labels)} labels")
    return images, labels


def write_idx_images(path, images):
    images = np.ascontiguousarray(np.asarray(images, dtype=np.uint8))
    if images.ndim != 3:
        raise ValueError(f"expected (N, rows, cols) array, got shape {images.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.ascontiguousarray(np.asarray(labels, dtype=np.uint8))
    if labels.ndim != 1:
        raise ValueError(f"expected flat label array, got shape {labels.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", LABEL_MAGIC, labels.size))
        fh.write(labels.tobytes())


def normalize(raw) -> GridImage:
    """Scale a nonnegative grid to total mass 1.

    Intensity grids (e.g. 0..255 bytes) become distributions; an all-zero
    grid has no distribution and is rejected, since smoothing one would be
    meaningless.  Already-normalized input passes through unchanged.
    """
    a = _as_float_grid(raw, "raw image")
    if np.any(a < 0):
        raise NormalizationError("raw image intensities must be nonnegative")
    total = float(a.sum())
    if total <= 0.0:
        raise DegenerateImageError("image has zero total mass")
    return GridImage(a / total)


def normalize_multichannel(raw) -> MultiChannelImage:
    """Scale a nonnegative (C, n, m) stack so the grand total mass is 1."""
    a = np.asarray(raw, dtype=float)
    if a.ndim != 3 or a.size == 0:
        raise ValueError(f"expected a nonempty (C, n, m) array, got shape {a.shape}")
    if np.any(a < 0):
        raise NormalizationError("raw intensities must be nonnegative")
    total = float(a.sum())
    if total <= 0.0:
        raise DegenerateImageError("image has zero total mass")
    return MultiChannelImage(a / total)


@dataclass
class LabeledDataset:
    """Normalized images with 1-based integer labels."""

    images: list
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if self.labels.ndim != 1 or len(self.images) != self.labels.size:
            raise PairingError(
                f"{len(self.images)} images but label array of shape {self.labels.shape}"
            )
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.labels.size and (self.labels.min() < 1 or self.labels.max() > self.num_classes):
            raise ValueError(f"labels must lie in [1, {self.num_classes}]")
        kinds = {type(img) for img in self.images}
        if len(kinds) > 1:
            raise ValueError(f"mixed image types in one dataset: {sorted(k.__name__ for k in kinds)}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, ...]:
        img = self.images[0]
        return img.channels.shape if isinstance(img, MultiChannelImage) else img.shape

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense (N, n, m) or (N, C, n, m) pixel array plus 1-based labels."""
        if not self.images:
            return np.zeros((0,)), self.labels.copy()
        if isinstance(self.images[0], MultiChannelImage):
            x = np.stack([img.channels for img in self.images])
        else:
            x = np.stack([img.values for img in self.images])
        return x, self.labels.copy()

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=int)
        return LabeledDataset(
            [self.images[i] for i in indices], self.labels[indices], self.num_classes
        )


def make_dataset(images, labels, num_classes: int | None = None, label_base: int = 0) -> LabeledDataset:
    """Normalize raw grids and shift labels to the 1-based convention.

    label_base says what the smallest raw label means (0 for IDX files).
    Zero-mass images are rejected outright; filter them beforehand (see
    nonzero_mask) if the source may contain any.
    """
    images = np.asarray(images)
    labels = np.asarray(labels).astype(int)
    if len(images) != len(labels):
        raise PairingError(f"{len(images)} images but {len(labels)} labels")
    shifted = labels + (1 - label_base)
    if num_classes is None:
        num_classes = int(shifted.max()) if shifted.size else 2
    normed = []
    for i, arr in enumerate(images):
        try:
            normed.append(normalize(arr))
        except DegenerateImageError as exc:
            raise DegenerateImageError(f"image {i}: {exc}") from None
    return LabeledDataset(normed, shifted, num_classes)


def nonzero_mask(images) -> np.ndarray:
    """Boolean mask of images with positive total mass."""
    images = np.asarray(images, dtype=float)
    return images.sum(axis=tuple(range(1, images.ndim))) > 0


def synthetic_dataset(kind: str, size: int, shape: tuple[int, int] = (6, 6),
                      seed=0) -> LabeledDataset:
    """Deterministic synthetic image sets for desk-scale experiments.

    bars:    2 classes, a full-width horizontal bar on the center row vs a
             full-height vertical bar on the center column, over faint
             background noise; linearly separable.
    blobs:   2 classes, a soft blob centered in the top half vs the bottom
             half; the discriminative signal is a half-image mass aggregate.
    corners: 4 classes, a bright 2x2 block in one of the four corners.
    """
    if size < 1:
        raise ValueError("size must be >= 1")
    n, m = shape
    rng = np.random.default_rng(seed)
    rows_idx, cols_idx = np.indices((n, m))
    images = []
    labels = np.empty(size, dtype=int)
    if kind == "bars":
        if n < 2 or m < 2:
            raise ValueError("bars need at least a 2x2 grid")
        for i in range(size):
            label = int(rng.integers(1, 3))
            base = rng.uniform(0.0, 0.1, size=(n, m))
            if label == 1:
                base[n // 2, :] += 1.0
            else:
                base[:, m // 2] += 1.0
            images.append(normalize(base))
            labels[i] = label
        return LabeledDataset(images, labels, 2)
    if kind == "blobs":
        if n < 4 or m < 3:
            raise ValueError("blobs need at least a 4x3 grid")
        for i in range(size):
            label = int(rng.integers(1, 3))
            if label == 1:
                ci = rng.uniform(0.5, n / 2 - 1.5)
            else:
                ci = rng.uniform(n / 2 + 0.5, n - 1.5)
            cj = rng.uniform(1.0, m - 2.0)
            blob = np.exp(-((rows_idx - ci) ** 2 + (cols_idx - cj) ** 2) / (2 * 0.9**2))
            base = blob + rng.uniform(0.0, 0.05, size=(n, m))
            images.append(normalize(base))
            labels[i] = label
        return LabeledDataset(images, labels, 2)
    if kind == "corners":
        if n < 3 or m < 3:
            raise ValueError("corners need at least a 3x3 grid")
        anchors = [(0, 0), (0, m - 2), (n - 2, 0), (n - 2, m - 2)]
        for i in range(size):
            label = int(rng.integers(1, 5))
            base = rng.uniform(0.0, 0.05, size=(n, m))
            r0, c0 = anchors[label - 1]
            base[r0 : r0 + 2, c0 : c0 + 2] += 0.5
            images.append(normalize(base))
            labels[i] = label
        return LabeledDataset(images, labels, 4)
    raise ValueError(f"unknown synthetic dataset kind {kind!r}")


def export_csv(dataset: LabeledDataset, path):
    """Write a dataset as one flattened row per image: id, label, pixels in
    row-major order (channel-major first for multichannel)."""
    x, y = dataset.as_arrays()
    flat = x.reshape(len(dataset), -1) if len(dataset) else x.reshape(0, 0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"] + [f"v{i}" for i in range(flat.shape[1])])
        for i in range(len(dataset)):
            writer.writerow([i, int(y[i])] + [repr(float(v)) for v in flat[i]])
