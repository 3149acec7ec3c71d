"""Dataset ingestion: CIFAR-10 binary batches and seeded synthetic blobs.

Pixels are always delivered in [0, 1] so attack budgets in /255 units apply
directly; optional normalization constants are carried on the spec and
applied inside the model, never to the stored pixels.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


class DataError(Exception):
    """Raised for malformed dataset files or impossible split requests."""


RECORD_BYTES = 3073  # 1 label byte + 3 * 1024 channel-planar pixel bytes
_PLANE = 1024


@dataclass(frozen=True)
class DatasetSpec:
    """Where data comes from and how it is shaped."""

    source: str = "synthetic-blobs"  # or "cifar10-binary"
    path: str | None = None
    image_size: int = 16
    class_count: int = 2
    n_train: int = 256
    n_test: int = 64
    separation: float = 0.12
    noise: float = 0.12
    normalization: tuple[list[float], list[float]] | None = None
    rng_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "source": self.source, "path": self.path,
            "image_size": self.image_size, "class_count": self.class_count,
            "n_train": self.n_train, "n_test": self.n_test,
            "separation": self.separation, "noise": self.noise,
            "normalization": list(self.normalization)
            if self.normalization else None,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        norm = d.get("normalization")
        return cls(
            source=str(d.get("source", "synthetic-blobs")),
            path=d.get("path"),
            image_size=int(d.get("image_size", 16)),
            class_count=int(d.get("class_count", 2)),
            n_train=int(d.get("n_train", 256)),
            n_test=int(d.get("n_test", 64)),
            separation=float(d.get("separation", 0.12)),
            noise=float(d.get("noise", 0.12)),
            normalization=(list(norm[0]), list(norm[1])) if norm else None,
            rng_seed=int(d.get("rng_seed", 0)),
        )


@dataclass
class Dataset:
    """In-memory image classification dataset with pixels in [0, 1]."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    class_count: int
    spec: DatasetSpec = field(default_factory=DatasetSpec)

    def search_split(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Equal train/validation halves of the training set."""
        n = self.train_x.shape[0]
        half = n // 2
        if half < 1:
            raise DataError(
                f"dataset with {n} training images cannot be split into "
                f"equal halves")
        return (self.train_x[:half], self.train_y[:half],
                self.train_x[half:2 * half], self.train_y[half:2 * half])


def _parse_batch_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES != 0:
        full = raw.size // RECORD_BYTES
        raise DataError(
            f"{path}: file length {raw.size} is not a multiple of "
            f"{RECORD_BYTES}; truncated record starts at byte offset "
            f"{full * RECORD_BYTES}")
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DataError(
            f"{path}: record {int(bad[0])} has label byte "
            f"{int(labels[bad[0]])} > 9")
    # Channel-planar: 1024 red, 1024 green, 1024 blue, row-major per plane.
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return pixels, labels.astype(np.int64)


def load_cifar10(path: str, spec: DatasetSpec | None = None) -> Dataset:
    """Parse the standard binary batch files from a directory."""
    if not os.path.isdir(path):
        raise DataError(f"dataset directory {path!r} does not exist")
    train_files = [os.path.join(path, f"data_batch_{i}.bin")
                   for i in range(1, 6)]
    train_files = [f for f in train_files if os.path.exists(f)]
    if not train_files:
        raise DataError(f"no data_batch_*.bin files found under {path!r}")
    xs, ys = [], []
    for f in train_files:
        x, y = _parse_batch_file(f)
        xs.append(x)
        ys.append(y)
    train_x, train_y = np.concatenate(xs), np.concatenate(ys)
    test_path = os.path.join(path, "test_batch.bin")
    if os.path.exists(test_path):
        test_x, test_y = _parse_batch_file(test_path)
    else:
        test_x = np.zeros((0, 3, 32, 32))
        test_y = np.zeros(0, dtype=np.int64)
    spec = spec or DatasetSpec(source="cifar10-binary", path=path,
                               image_size=32, class_count=10)
    return Dataset(train_x, train_y, test_x, test_y, class_count=10, spec=spec)


def synth_blobs(spec: DatasetSpec) -> Dataset:
    """Seeded class-template images: 0.5 + separation * template + noise.

    One Gaussian template per class is drawn first (normalized to unit rms),
    labels cycle round-robin so classes stay balanced, and every image is the
    shifted template plus fresh Gaussian pixel noise, clipped to [0, 1]. The
    construction is fully determined by (rng_seed, image_size, class_count,
    n_train, n_test, separation, noise).
    """
    if spec.class_count < 2:
        raise DataError(f"need at least two classes, got {spec.class_count}")
    rng = np.random.default_rng(spec.rng_seed)
    e = spec.image_size
    templates = rng.standard_normal((spec.class_count, 3, e, e))
    templates /= np.sqrt((templates ** 2).mean(axis=(1, 2, 3),
                                               keepdims=True))

    def make(n: int) -> tuple[np.ndarray, np.ndarray]:
        y = np.arange(n) % spec.class_count
        x = (0.5 + spec.separation * templates[y]
             + spec.noise * rng.standard_normal((n, 3, e, e)))
        return np.clip(x, 0.0, 1.0), y.astype(np.int64)

    train_x, train_y = make(spec.n_train)
    test_x, test_y = make(spec.n_test)
    return Dataset(train_x, train_y, test_x, test_y,
                   class_count=spec.class_count, spec=spec)


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.source == "synthetic-blobs":
        return synth_blobs(spec)
    if spec.source == "cifar10-binary":
        if not spec.path:
            raise DataError("cifar10-binary source needs a dataset path")
        return load_cifar10(spec.path, spec)
    raise DataError(f"unknown dataset source {spec.source!r}")


def batch_indices(n: int, batch_size: int,
                  rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Split [0, n) into batches, shuffled when an rng is supplied."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]
