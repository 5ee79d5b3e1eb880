"""Dataset readers (CIFAR-10/100 binary, MNIST IDX), subsets and test-time perturbation."""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, UsageError
from .rng import Purpose, stream
from .transforms import bilinear_taps

CIFAR_PIXELS = 3 * 32 * 32


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray   # (N, C, H, W) float32, normalized
    labels: np.ndarray   # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError(f"dataset: images {self.images.shape} and labels {self.labels.shape} disagree")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"dataset: labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)


def _read_bytes(path: Path) -> bytes:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _find(directory: Path, name: str) -> Path:
    for cand in (directory / name, directory / f"{name}.gz"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{name} not found in {directory}")


def _cifar_records(path: Path, label_bytes: int, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    raw = np.frombuffer(_read_bytes(path), dtype=np.uint8)
    rec = label_bytes + CIFAR_PIXELS
    if raw.size == 0 or raw.size % rec:
        raise FormatError(f"{path.name}: {raw.size} bytes is not a whole number of {rec}-byte records "
                          f"(partial record at byte offset {raw.size - raw.size % rec})")
    table = raw.reshape(-1, rec)
    labels = table[:, label_bytes - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        off = int(bad[0]) * rec + label_bytes - 1
        raise FormatError(f"{path.name}: label {labels[bad[0]]} >= {num_classes} at byte offset {off}")
    return table[:, label_bytes:].reshape(-1, 3, 32, 32), labels


def channel_stats(images_u8: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std of ``images_u8 / 255``."""
    c = images_u8.shape[1]
    flat = images_u8.transpose(1, 0, 2, 3).reshape(c, -1)
    mean = np.empty(c)
    std = np.empty(c)
    for i in range(c):
        counts = np.bincount(flat[i], minlength=256).astype(np.float64)
        vals = np.arange(256) / 255.0
        n = counts.sum()
        mean[i] = (counts * vals).sum() / n
        std[i] = math.sqrt(max((counts * (vals - mean[i]) ** 2).sum() / n, 1e-12))
    return mean, std


def normalize(images_u8: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    x = images_u8.astype(np.float32)
    x *= np.float32(1.0 / 255.0)
    x -= mean.astype(np.float32)[None, :, None, None]
    x /= std.astype(np.float32)[None, :, None, None]
    return x


def _pair(train_u8, train_y, test_u8, test_y, num_classes) -> tuple[Dataset, Dataset]:
    mean, std = channel_stats(train_u8)
    return (Dataset(normalize(train_u8, mean, std), train_y, num_classes, "train"),
            Dataset(normalize(test_u8, mean, std), test_y, num_classes, "test"))


def read_cifar10(directory: str | os.PathLike) -> tuple[Dataset, Dataset]:
    """Read ``data_batch_{1..5}.bin`` and ``test_batch.bin``; returns (train, test)."""
    d = Path(directory)
    parts = [_cifar_records(_find(d, f"data_batch_{i}.bin"), 1, 10) for i in range(1, 6)]
    test_x, test_y = _cifar_records(_find(d, "test_batch.bin"), 1, 10)
    return _pair(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                 test_x, test_y, 10)


def read_cifar100(directory: str | os.PathLike) -> tuple[Dataset, Dataset]:
    """Read ``train.bin``/``test.bin``; the fine label (second byte) is used."""
    d = Path(directory)
    tx, ty = _cifar_records(_find(d, "train.bin"), 2, 100)
    vx, vy = _cifar_records(_find(d, "test.bin"), 2, 100)
    return _pair(tx, ty, vx, vy, 100)


def _idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path.name}: truncated header (byte offset 0)")
    found = struct.unpack_from(">I", raw)[0]
    if found != magic:
        raise FormatError(f"{path.name}: magic {found} != {magic} at byte offset 0")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    need = head + int(np.prod(dims))
    if len(raw) != need:
        raise FormatError(f"{path.name}: expected {need} bytes from header dims {dims}, found {len(raw)} "
                          f"(mismatch at byte offset {min(len(raw), need)})")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def read_mnist(directory: str | os.PathLike) -> tuple[Dataset, Dataset]:
    """Read the four IDX files (optionally gzipped); returns (train, test)."""
    d = Path(directory)
    out = []
    for prefix in ("train", "t10k"):
        x = _idx(_find(d, f"{prefix}-images-idx3-ubyte"), 2051, 3)
        y = _idx(_find(d, f"{prefix}-labels-idx1-ubyte"), 2049, 1).astype(np.int64)
        if len(x) != len(y):
            raise FormatError(f"{prefix}: {len(x)} images but {len(y)} labels")
        if y.size and y.max() > 9:
            off = 8 + int(np.argmax(y > 9))
            raise FormatError(f"{prefix}-labels: label {y.max()} > 9 at byte offset {off}")
        out.append((x[:, None], y))
    return _pair(out[0][0], out[0][1], out[1][0], out[1][1], 10)


READERS = {"cifar10": read_cifar10, "cifar100": read_cifar100, "mnist": read_mnist}
SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary", "mnist": "mnist"}


def read_dataset(dataset_id: str, directory: str | os.PathLike) -> tuple[Dataset, Dataset]:
    """Read from ``directory`` or, when present, its standard subdirectory for the dataset."""
    try:
        reader = READERS[dataset_id]
    except KeyError:
        raise ConfigError(f"dataset: unknown id {dataset_id!r} ({', '.join(READERS)})") from None
    sub = Path(directory) / SUBDIRS[dataset_id]
    return reader(sub if sub.is_dir() else directory)


def subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Class-stratified deterministic sample of ``n`` items (original order kept)."""
    total = len(dataset)
    if n > total or n < 1:
        raise UsageError(f"subset: n={n} must be in [1, {total}]")
    classes, counts = np.unique(dataset.labels, return_counts=True)
    quota = counts * n / total
    take = np.floor(quota).astype(int)
    remainder = n - take.sum()
    # hand out leftovers by largest fractional part, lower class first on ties
    order = sorted(range(len(classes)), key=lambda i: (-(quota[i] - take[i]), classes[i]))
    for i in order[:remainder]:
        take[i] += 1
    picked = []
    for cls, k in zip(classes, take):
        members = np.flatnonzero(dataset.labels == cls)
        rng = stream(seed, Purpose.SUBSET, int(cls))
        picked.append(rng.choice(members, size=int(k), replace=False))
    return dataset.take(np.sort(np.concatenate(picked)))


PERTURB_KINDS = ("rotate", "translate", "crop")


@dataclass(frozen=True)
class DataPerturbSpec:
    """Test-time input perturbation.

    rotate: angle interval in degrees; translate: maximum shift fractions
    ``(fy, fx)``; crop: area-ratio interval, cropped then resized back.
    """

    kind: str
    bounds: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "bounds", tuple(float(b) for b in self.bounds))
        lo, hi = self.bounds
        if self.kind not in PERTURB_KINDS:
            raise ConfigError(f"perturb: unknown kind {self.kind!r} ({', '.join(PERTURB_KINDS)})")
        if self.kind in ("rotate", "crop") and lo > hi:
            raise ConfigError(f"perturb.{self.kind}: lower bound {lo} exceeds upper bound {hi}")
        if self.kind == "crop" and not (0 < lo and hi <= 1):
            raise ConfigError(f"perturb.crop: ratios {self.bounds} must lie in (0, 1]")
        if self.kind == "translate" and not (0 <= lo <= 1 and 0 <= hi <= 1):
            raise ConfigError(f"perturb.translate: fractions {self.bounds} must lie in [0, 1]")

    @classmethod
    def parse(cls, text: str) -> "DataPerturbSpec":
        kind, _, args = text.strip().partition(":")
        vals = [v for v in args.split(",") if v.strip()]
        if len(vals) != 2:
            raise ConfigError(f"perturb: expected 'kind:low,high', got {text!r}")
        try:
            return cls(kind.strip(), (float(vals[0]), float(vals[1])))
        except ValueError:
            raise ConfigError(f"perturb: non-numeric bounds in {text!r}") from None

    def to_text(self) -> str:
        return f"{self.kind}:{self.bounds[0]:g},{self.bounds[1]:g}"


def _warp(images: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    """Bilinear resample each image at per-image source coords ``(N, H, W)``; zeros off-frame."""
    n, c, h, w = images.shape
    idx, wts = bilinear_taps(sy.reshape(-1), sx.reshape(-1), h, w)
    flat = images.reshape(n, c, h * w).astype(np.float64)
    gathered = np.take_along_axis(flat, idx.reshape(n, 1, -1), axis=2).reshape(n, c, h * w, 4)
    out = (gathered * wts.reshape(n, 1, h * w, 4)).sum(axis=-1)
    return out.reshape(n, c, h, w).astype(np.float32)


def _shift_images(images: np.ndarray, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    out = np.zeros_like(images)
    h, w = images.shape[-2:]
    for i, (a, b) in enumerate(zip(dy, dx)):
        a, b = int(a), int(b)
        if abs(a) >= h or abs(b) >= w:
            continue
        out[i, :, max(a, 0):h + min(a, 0), max(b, 0):w + min(b, 0)] = \
            images[i, :, max(-a, 0):h - max(a, 0), max(-b, 0):w - max(b, 0)]
    return out


def perturb_images(images: np.ndarray, spec: DataPerturbSpec, seed: int) -> np.ndarray:
    """Perturb each image with parameters drawn from the stream ``(seed, index)``."""
    n, _, h, w = images.shape
    lo, hi = spec.bounds
    rngs = [stream(seed, Purpose.PERTURB, i) for i in range(n)]
    if spec.kind == "translate":
        # shift in pixels ~ U(-f * extent, f * extent), rounded half up
        shifts = np.array([[math.floor(r.uniform(-lo * h, lo * h) + 0.5), math.floor(r.uniform(-hi * w, hi * w) + 0.5)]
                           for r in rngs], dtype=int)
        return _shift_images(images, shifts[:, 0], shifts[:, 1])
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r, c = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    if spec.kind == "rotate":
        angles = np.array([r_.uniform(lo, hi) for r_ in rngs])
        if np.all(angles == 0.0):
            return images.astype(np.float32, copy=True)
        rad = np.radians(angles)[:, None, None]
        y, x = r - cy, c - cx
        sy = cy + np.cos(rad) * y + np.sin(rad) * x
        sx = cx - np.sin(rad) * y + np.cos(rad) * x
        return _warp(images, sy, sx)
    # crop: square window of area ratio ~ U(lo, hi), resized back to (h, w)
    sy = np.empty((n, h, w))
    sx = np.empty((n, h, w))
    for i, rng in enumerate(rngs):
        side = math.sqrt(rng.uniform(lo, hi))
        ch, cw = side * h, side * w
        y0 = rng.uniform(0.0, h - ch) if h > ch else 0.0
        x0 = rng.uniform(0.0, w - cw) if w > cw else 0.0
        sy[i] = y0 + (r * (ch - 1) / (h - 1) if h > 1 else (ch - 1) / 2)
        sx[i] = x0 + (c * (cw - 1) / (w - 1) if w > 1 else (cw - 1) / 2)
    return _warp(images, sy, sx)


def perturb_testset(dataset: Dataset, spec: DataPerturbSpec, seed: int) -> Dataset:
    return Dataset(perturb_images(dataset.images, spec, seed), dataset.labels, dataset.num_classes,
                   f"{dataset.split}+{spec.to_text()}")
