"""Dataset ingestion, augmentation, and the synthetic training target.

Supports the standard 32x32 binary image format (one coarse-label byte, one
fine-label byte, 3072 pixel bytes as R, G, B planes in row-major order, 3074
bytes per record) plus a small converted-container variant with a "DA2D"
header for datasets re-encoded from other distributions. Images load as f32
in [0, 1], scaled by 1/255, in record order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .tensor import Rng, Tensor

__all__ = [
    "Dataset",
    "AugmentSpec",
    "load_cifar100",
    "cifar100_record_bytes",
    "write_converted",
    "load_converted",
    "augment",
    "apply_crop_flip",
    "normalize",
    "compute_channel_stats",
    "synth_dataset",
    "make_batch",
]

RECORD_PIXELS = 3072
CIFAR_RECORD = RECORD_PIXELS + 2  # coarse byte + fine byte + pixels
CONVERTED_RECORD = RECORD_PIXELS + 1  # single label byte + pixels
CONVERTED_MAGIC = b"DA2D"
CONVERTED_VERSION = 1


@dataclass
class Dataset:
    """Images (M, 3, 32, 32) in [0, 1] with integer labels in [0, num_classes)."""

    images: Tensor
    labels: np.ndarray
    num_classes: int
    coarse_labels: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ShapeError(f"images must be (M, 3, H, W), got {self.images.shape}")
        m = self.images.shape[0]
        if m < 1:
            raise ShapeError("dataset must hold at least one image")
        if self.labels.shape != (m,):
            raise ShapeError(f"{self.labels.shape[0]} labels for {m} images")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ShapeError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{self.labels.min()}, {self.labels.max()}]")

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass(frozen=True)
class AugmentSpec:
    """Pad-crop-flip policy plus the normalization constants for the run."""

    pad: int = 4
    crop: int = 32
    flip_prob: float = 0.5
    mean: tuple[float, float, float] | None = None
    std: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.pad < 0:
            raise ConfigError(f"pad must be >= 0, got {self.pad}")
        if self.crop < 1:
            raise ConfigError(f"crop must be >= 1, got {self.crop}")


def _decode_pixel_planes(pixels: np.ndarray) -> np.ndarray:
    """uint8 (M, 3072) plane-ordered bytes -> f32 (M, 3, 32, 32) in [0, 1]."""
    return (pixels.reshape(-1, 3, 32, 32).astype(np.float32)) / 255.0


def load_cifar100(dir_path, split: str = "train") -> Dataset:
    """Read `<split>.bin` records: fine labels kept, record order preserved."""
    if split not in ("train", "test"):
        raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
    path = Path(dir_path) / f"{split}.bin"
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    n_records, trailing = divmod(raw.size, CIFAR_RECORD)
    if trailing != 0:
        raise FormatError(
            f"{path}: length {raw.size} is not a multiple of {CIFAR_RECORD} "
            f"({trailing} trailing bytes at offset {n_records * CIFAR_RECORD})")
    if n_records == 0:
        raise FormatError(f"{path}: file holds no records")
    records = raw.reshape(n_records, CIFAR_RECORD)
    coarse = records[:, 0].astype(np.int64)
    fine = records[:, 1].astype(np.int64)
    images = _decode_pixel_planes(records[:, 2:])
    return Dataset(images=Tensor(images), labels=fine, num_classes=100,
                   coarse_labels=coarse)


def cifar100_record_bytes(ds: Dataset, index: int) -> bytes:
    """Re-encode one loaded record to its original byte layout."""
    if ds.coarse_labels is None:
        raise FormatError("dataset carries no coarse labels to re-encode")
    img = ds.images.data[index]
    pixels = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return bytes([int(ds.coarse_labels[index]), int(ds.labels[index])]) + pixels.tobytes()


def write_converted(path, ds: Dataset) -> None:
    """Write the converted-container layout: DA2D header + 1-byte-label records."""
    path = Path(path)
    m = len(ds)
    with open(path, "wb") as fh:
        fh.write(CONVERTED_MAGIC)
        fh.write(struct.pack("<III", CONVERTED_VERSION, ds.num_classes, m))
        pixels = np.clip(np.rint(ds.images.data * 255.0), 0, 255).astype(np.uint8)
        labels = ds.labels.astype(np.uint8)
        body = np.empty((m, CONVERTED_RECORD), dtype=np.uint8)
        body[:, 0] = labels
        body[:, 1:] = pixels.reshape(m, RECORD_PIXELS)
        fh.write(body.tobytes())


def load_converted(path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != CONVERTED_MAGIC:
        raise FormatError(f"{path}: missing {CONVERTED_MAGIC!r} magic")
    version, classes, n_records = struct.unpack("<III", raw[4:16])
    if version != CONVERTED_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if body.size != n_records * CONVERTED_RECORD:
        raise FormatError(
            f"{path}: body holds {body.size} bytes, header promises "
            f"{n_records} records of {CONVERTED_RECORD} bytes")
    records = body.reshape(n_records, CONVERTED_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= classes:
        raise FormatError(f"{path}: label {labels.max()} exceeds class count {classes}")
    images = _decode_pixel_planes(records[:, 1:])
    return Dataset(images=Tensor(images), labels=labels, num_classes=classes)


def augment(img: Tensor, spec: AugmentSpec, rng: Rng) -> Tensor:
    """Zero-pad, random-crop back to size, and flip with probability flip_prob.

    Draw order is fixed (crop row, crop column, flip coin), so a given rng
    stream always produces the same transform.
    """
    if img.ndim != 3:
        raise ShapeError(f"augment expects a single (C, H, W) image, got {img.shape}")
    _, h, w = img.shape
    span_y = h + 2 * spec.pad - spec.crop + 1
    span_x = w + 2 * spec.pad - spec.crop + 1
    if span_y < 1 or span_x < 1:
        raise ConfigError(
            f"crop {spec.crop} exceeds padded extent {(h + 2 * spec.pad, w + 2 * spec.pad)}")
    iy = int(rng.integers(0, span_y))
    ix = int(rng.integers(0, span_x))
    flip = rng.random() < spec.flip_prob
    return apply_crop_flip(img, spec, iy, ix, flip)


def apply_crop_flip(img: Tensor, spec: AugmentSpec, iy: int, ix: int, flip: bool) -> Tensor:
    """The deterministic core of :func:`augment` with explicit draw outcomes."""
    pad, crop_sz = spec.pad, spec.crop
    padded = np.pad(img.data, ((0, 0), (pad, pad), (pad, pad)))
    crop = padded[:, iy:iy + crop_sz, ix:ix + crop_sz]
    if flip:
        crop = crop[:, :, ::-1]
    return Tensor(crop)


def normalize(img: Tensor, mean, std) -> Tensor:
    """(img - mean) / std per channel; works on (C, H, W) or (N, C, H, W)."""
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    if np.any(std <= 0):
        raise ConfigError(f"std must be positive per channel, got {std.tolist()}")
    ax = (-1, 1, 1) if img.ndim == 3 else (1, -1, 1, 1)
    return Tensor((img.data - mean.reshape(ax)) / std.reshape(ax))


def compute_channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over every pixel of the split."""
    data = ds.images.data
    mean = data.mean(axis=(0, 2, 3))
    std = data.std(axis=(0, 2, 3))
    return mean, std


def synth_dataset(classes: int, per_class: int, seed: int, size: int = 32) -> Dataset:
    """Class-conditional oriented gratings under a Gaussian blob envelope.

    Each class carries a distinct spatial frequency, so discriminating them
    rewards filters of different sizes; position, orientation, phase, and
    pixel noise vary per sample. Labels are balanced, layout is class-major.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ConfigError(f"need at least 1 sample per class, got {per_class}")
    rng = Rng(seed, stream=0x5D)
    # cycles across the image per class, spread over octaves
    freqs = np.geomspace(1.5, size / 3.0, num=classes)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size

    images = np.empty((classes * per_class, 3, size, size), dtype=np.float32)
    labels = np.empty(classes * per_class, dtype=np.int64)
    idx = 0
    for c in range(classes):
        for _ in range(per_class):
            theta = rng.random() * np.pi
            phase = rng.random() * 2.0 * np.pi
            u = np.cos(theta) * xx + np.sin(theta) * yy
            grating = np.sin(2.0 * np.pi * freqs[c] * u + phase)
            cy, cx = 0.25 + 0.5 * rng.random(), 0.25 + 0.5 * rng.random()
            envelope = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.18 ** 2)))
            base = 0.5 + 0.45 * grating * envelope
            for ch in range(3):
                gain = 0.7 + 0.3 * rng.random()
                noise = rng.normal((size, size), 0.0, 0.02)
                images[idx, ch] = np.clip(gain * base + noise, 0.0, 1.0)
            labels[idx] = c
            idx += 1
    return Dataset(images=Tensor(images), labels=labels, num_classes=classes)


def make_batch(ds: Dataset, indices, spec: AugmentSpec | None, rng: Rng | None,
               epoch: int = 0) -> tuple[Tensor, np.ndarray]:
    """Assemble one training batch with optional augmentation and normalization.

    Augmentation draws come from a per-sample rng stream keyed by (epoch,
    dataset index), so batch composition and worker order cannot change the
    result.
    """
    indices = np.asarray(indices, dtype=np.int64)
    imgs = []
    for j in indices:
        img = Tensor(ds.images.data[j])
        if spec is not None and rng is not None:
            img = augment(img, spec, rng.split((epoch << 32) | int(j)))
        imgs.append(img.data)
    batch = Tensor(np.stack(imgs))
    if spec is not None and spec.mean is not None and spec.std is not None:
        batch = normalize(batch, spec.mean, spec.std)
    return batch, ds.labels[indices]
