"""Desk-scale data: synthetic 2-D generators, IDX image files, and the image
augmentation / normalization pipeline."""

from __future__ import annotations

import csv
import hashlib
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class BadMagicError(IdxError):
    pass


class TruncatedError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int
    declared_range: tuple | None = None
    split: str = "all"
    channel_stats: tuple | None = None
    name: str = ""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels outside [0, class_count)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def is_image(self) -> bool:
        return self.inputs.ndim == 4

    @property
    def input_shape(self) -> tuple:
        return tuple(self.inputs.shape[1:])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return replace(self, inputs=self.inputs[idx], labels=self.labels[idx],
                       split=split or self.split)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs).tobytes())
        h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint, seeded split.  Channel statistics come from the train part only."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    train = ds.subset(np.sort(order[n_test:]), "train")
    test = ds.subset(np.sort(order[:n_test]), "test")
    if ds.is_image:
        stats = compute_channel_stats(train.inputs)
        train.channel_stats = test.channel_stats = stats
    return train, test


# ---------------------------------------------------------------------------
# Synthetic generators (unbounded plane, no declared range)
# ---------------------------------------------------------------------------


def _class_sizes(n: int, k: int) -> list[int]:
    if n < 2:
        raise ValueError("need at least 2 points")
    return [n // k + (1 if c < n % k else 0) for c in range(k)]


def _shuffled(x, y, rng, name, k) -> Dataset:
    order = rng.permutation(len(y))
    return Dataset(x[order], y[order], k, name=name)


def gen_two_moons(n: int, noise_sigma: float = 0.1, seed: int = 0, ambient_dim: int = 2,
                  nuisance_sigma: float | None = None) -> Dataset:
    """Two interleaved unit half circles, one per class, plus Gaussian noise.

    ``ambient_dim > 2`` appends class-independent Gaussian coordinates with
    standard deviation ``nuisance_sigma`` (default ``noise_sigma``).
    """
    if ambient_dim < 2:
        raise ValueError("ambient_dim must be >= 2")
    rng = np.random.default_rng(seed)
    n0, n1 = _class_sizes(n, 2)
    t0 = rng.uniform(0.0, math.pi, n0)
    t1 = rng.uniform(0.0, math.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower])
    if noise_sigma:
        x = x + rng.normal(0.0, noise_sigma, x.shape)
    if ambient_dim > 2:
        sd = noise_sigma if nuisance_sigma is None else nuisance_sigma
        x = np.concatenate([x, rng.normal(0.0, sd, (len(x), ambient_dim - 2))], axis=1)
    y = np.concatenate([np.zeros(n0, int), np.ones(n1, int)])
    return _shuffled(x, y, rng, "two_moons", 2)


def blob_centers(k: int, spacing: float) -> np.ndarray:
    """Vertices of a regular k-gon whose neighbouring vertices are ``spacing`` apart."""
    radius = spacing / (2.0 * math.sin(math.pi / k))
    angles = 2.0 * math.pi * np.arange(k) / k
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def gen_gaussian_blobs(k: int, n: int, spacing: float = 10.0, sigma: float = 1.0,
                       seed: int = 0) -> Dataset:
    if k < 2:
        raise ValueError("need at least 2 blobs")
    rng = np.random.default_rng(seed)
    centers = blob_centers(k, spacing)
    sizes = _class_sizes(n, k)
    x = np.concatenate([centers[c] + rng.normal(0.0, sigma, (m, 2)) for c, m in enumerate(sizes)])
    y = np.concatenate([np.full(m, c) for c, m in enumerate(sizes)])
    return _shuffled(x, y, rng, "blobs", k)


def gen_rings(n: int, radii=(1.0, 2.0), sigma: float = 0.1, seed: int = 0) -> Dataset:
    """Concentric circles, one class per radius, with radial Gaussian noise."""
    radii = tuple(radii)
    rng = np.random.default_rng(seed)
    sizes = _class_sizes(n, len(radii))
    parts = []
    for r, m in zip(radii, sizes):
        t = rng.uniform(0.0, 2.0 * math.pi, m)
        rr = r + rng.normal(0.0, sigma, m)
        parts.append(np.stack([rr * np.cos(t), rr * np.sin(t)], axis=1))
    y = np.concatenate([np.full(m, c) for c, m in enumerate(sizes)])
    return _shuffled(np.concatenate(parts), y, rng, "rings", len(radii))


def export_csv(ds: Dataset, path) -> None:
    """Write a flat CSV with header x0,...,x{d-1},label."""
    flat = ds.inputs.reshape(len(ds), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(flat.shape[1])] + ["label"])
        for row, label in zip(flat, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


def _read_header(data: bytes, path, magic: int, rank: int):
    if len(data) < 4:
        raise TruncatedError(f"{path}: file shorter than the magic number")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    end = 4 + 4 * rank
    if len(data) < end:
        raise TruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{rank}I", data[4:end])
    count = int(np.prod(dims))
    payload = data[end:]
    if len(payload) < count:
        raise TruncatedError(f"{path}: expected {count} payload bytes, found {len(payload)}")
    return dims, np.frombuffer(payload[:count], dtype=np.uint8)


def load_idx(images_path, labels_path, class_count: int | None = None,
             name: str = "idx") -> Dataset:
    """Read an (images, labels) pair of big-endian IDX files.

    Pixels are scaled by 1/255 and images get a leading channel axis.
    """
    dims, pixels = _read_header(Path(images_path).read_bytes(), images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), labels = _read_header(Path(labels_path).read_bytes(), labels_path, IDX_LABELS_MAGIC, 1)
    n, rows, cols = dims
    if n != n_labels:
        raise CountMismatchError(f"{images_path} has {n} images but {labels_path} has {n_labels} labels")
    inputs = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    if class_count is None:
        class_count = max(2, int(labels.max()) + 1) if n else 2
    return Dataset(inputs, labels.astype(np.int64), class_count, declared_range=(0.0, 1.0), name=name)


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Inverse of load_idx for single-channel images in [0, 1]."""
    if ds.inputs.ndim != 4 or ds.inputs.shape[1] != 1:
        raise ValueError("write_idx needs (N, 1, H, W) inputs")
    n, _, rows, cols = ds.inputs.shape
    pixels = np.clip(np.rint(ds.inputs[:, 0] * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


def sklearn_digits(seed: int = 0) -> Dataset:
    """The 8x8 handwritten digits bundled with scikit-learn, as [0, 1] images."""
    from sklearn.datasets import load_digits

    d = load_digits()
    pixels = np.rint(d.images * (255.0 / 16.0)) / 255.0
    return Dataset(pixels[:, None], d.target, 10, declared_range=(0.0, 1.0), name="digits")


# ---------------------------------------------------------------------------
# Augmentation and normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    max_shift: int | None = None  # None: ceil(4 * side / 32)
    pad_mode: str = "zero"


def max_shift_for(side: int) -> int:
    return math.ceil(4 * side / 32)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1]


def translate(img: np.ndarray, dy: int, dx: int, pad_mode: str = "zero") -> np.ndarray:
    """Shift a (C, H, W) image by (dy, dx) pixels, filling the exposed border."""
    c, h, w = img.shape
    py, px = abs(dy), abs(dx)
    mode = "constant" if pad_mode == "zero" else "reflect"
    padded = np.pad(img, ((0, 0), (py, py), (px, px)), mode=mode)
    top, left = py - dy, px - dx
    return padded[:, top:top + h, left:left + w]


def augment(batch: np.ndarray, rng: np.random.Generator, policy: AugmentPolicy | None = None) -> np.ndarray:
    """Random horizontal flips and translations for image batches.

    Non-image (flat) batches are returned unchanged without consuming
    randomness.  Labels are never touched.
    """
    if batch.ndim != 4:
        return batch
    policy = policy or AugmentPolicy()
    n, _, h, w = batch.shape
    shift = policy.max_shift if policy.max_shift is not None else max_shift_for(max(h, w))
    flips = rng.random(n) < policy.flip_prob
    shifts = rng.integers(-shift, shift + 1, size=(n, 2))
    out = np.empty_like(batch)
    for k in range(n):
        img = hflip(batch[k]) if flips[k] else batch[k]
        out[k] = translate(img, int(shifts[k, 0]), int(shifts[k, 1]), policy.pad_mode)
    return out


def compute_channel_stats(inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = inputs.mean(axis=(0, 2, 3))
    std = inputs.std(axis=(0, 2, 3))
    if np.any(std == 0):
        raise ValueError(f"channel(s) {np.flatnonzero(std == 0).tolist()} have zero variance")
    return mean, std


def normalize(batch: np.ndarray, channel_stats) -> np.ndarray:
    mean, std = (np.asarray(s, dtype=float) for s in channel_stats)
    if np.any(std == 0):
        raise ValueError("cannot normalize by a zero standard deviation")
    return (batch - mean[None, :, None, None]) / std[None, :, None, None]


def epsilon_to_normalized(epsilon, std) -> np.ndarray:
    """Convert a pixel-unit budget into per-channel normalized units."""
    return np.asarray(epsilon, dtype=float) / np.asarray(std, dtype=float)


class Preprocessor:
    """Per-batch pipeline: augmentation (training only) then normalization.

    Synthetic 2-D data passes through untouched.
    """

    def __init__(self, train: Dataset, augment_images: bool = True, normalize_images: bool = True,
                 policy: AugmentPolicy | None = None):
        self.is_image = train.is_image
        self.augment_images = augment_images and self.is_image
        self.stats = None
        if self.is_image and normalize_images:
            self.stats = train.channel_stats or compute_channel_stats(train.inputs)
        self.policy = policy or AugmentPolicy()
        self.declared_range = train.declared_range

    def __call__(self, raw: np.ndarray, rng=None, train: bool = False) -> np.ndarray:
        x = raw
        if train and self.augment_images and rng is not None:
            x = augment(x, rng, self.policy)
        if self.stats is not None:
            x = normalize(x, self.stats)
        return np.asarray(x, dtype=float)

    def attack_units(self, cfg):
        """Translate an attack config given in raw input units into model-input units."""
        if self.declared_range is not None and cfg.clamp_input_range is None:
            cfg = replace(cfg, clamp_input_range=tuple(self.declared_range))
        if self.stats is None:
            return cfg
        return cfg.in_normalized_units(*self.stats)

    def value_range(self):
        if self.declared_range is None:
            return None
        if self.stats is None:
            return tuple(self.declared_range)
        lo, hi = self.declared_range
        mean, std = (np.asarray(s).reshape(-1, 1, 1) for s in self.stats)
        return ((lo - mean) / std, (hi - mean) / std)
