"""Dataset ingestion, deterministic sharding and micro-batch iteration."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, FormatError

CIFAR_PIXELS = 3 * 32 * 32
_LABEL_BYTES = {"cifar10": 1, "cifar100": 2}
_CLASS_COUNT = {"cifar10": 10, "cifar100": 100}
_TRAIN_FILES = {
    "cifar10": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "cifar100": ["train.bin"],
}


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    class_count: int
    source: str

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index) -> Dataset:
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.class_count, self.source)


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------


def _resolve_files(path, variant: str) -> list[Path]:
    if isinstance(path, (str, Path)):
        p = Path(path)
        if p.is_dir():
            found = [p / name for name in _TRAIN_FILES[variant] if (p / name).exists()]
            if not found:
                raise FormatError(f"no {variant} training files under {p}")
            return found
        return [p]
    return [Path(x) for x in path]


def load_cifar_binary(path, variant: str = "cifar10") -> Dataset:
    """Read CIFAR binary records: label byte(s) then 3072 plane-major RGB bytes.

    ``path`` may be one file, a list of files, or a directory holding the
    standard training files. CIFAR-100 records carry (coarse, fine) labels;
    the fine label is used.
    """
    if variant not in _LABEL_BYTES:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    nlab = _LABEL_BYTES[variant]
    classes = _CLASS_COUNT[variant]
    rec = nlab + CIFAR_PIXELS
    chunks = []
    for f in _resolve_files(path, variant):
        raw = np.fromfile(f, dtype=np.uint8)
        if raw.size == 0 or raw.size % rec:
            raise FormatError(f"{f}: {raw.size} bytes is not a whole number of {rec}-byte records")
        chunks.append(raw.reshape(-1, rec))
    records = np.concatenate(chunks)
    labels = records[:, nlab - 1].astype(np.int64)
    if labels.max() >= classes:
        raise FormatError(f"label {labels.max()} out of range for {variant}")
    images = records[:, nlab:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, classes, variant)


def make_synthetic(
    n: int,
    class_count: int = 10,
    image_size: int = 32,
    seed: int = 0,
    channels: int = 3,
    noise: float = 0.25,
) -> Dataset:
    """Class-conditional Gaussian blobs around smooth per-class prototypes.

    Each class gets a prototype drawn on a coarse 4x4 grid and upsampled to
    ``image_size``; samples add isotropic Gaussian noise and clip to [0, 1].
    Labels are balanced: every class appears ``n // class_count`` or one more
    times.
    """
    if n < class_count:
        raise ConfigError(f"need n >= class_count, got n={n}, class_count={class_count}")
    rng = np.random.default_rng(seed)
    cells = 4 if image_size % 4 == 0 else 1
    coarse = rng.uniform(0.15, 0.85, size=(class_count, channels, cells, cells))
    rep = image_size // cells
    protos = np.repeat(np.repeat(coarse, rep, axis=2), rep, axis=3)
    labels = rng.permutation(np.arange(n) % class_count).astype(np.int64)
    images = protos[labels] + noise * rng.standard_normal((n, channels, image_size, image_size))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels, class_count, "synthetic")


# --------------------------------------------------------------------------
# Sharding and batching
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ShardSpec:
    mode: str  # "strong" | "weak"
    rank: int
    world_size: int
    weak_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("strong", "weak"):
            raise ConfigError(f"shard mode must be 'strong' or 'weak', got {self.mode!r}")
        if self.world_size < 1 or not 0 <= self.rank < self.world_size:
            raise ConfigError(f"rank {self.rank} outside world of size {self.world_size}")
        if self.mode == "weak":
            if self.weak_fraction <= 0:
                raise ConfigError(f"weak_fraction must be positive, got {self.weak_fraction}")
            if self.world_size * self.weak_fraction > 1 + 1e-9:
                raise ConfigError(
                    f"weak scaling overflows the dataset: {self.world_size} ranks x {self.weak_fraction} > 1"
                )


def shard_size(n: int, spec: ShardSpec) -> int:
    if spec.mode == "strong":
        return n // spec.world_size
    return int(math.floor(n * spec.weak_fraction + 1e-9))


def shard(ds: Dataset, spec: ShardSpec) -> Dataset:
    """This rank's contiguous slice of one seeded global shuffle.

    Strong mode splits the whole dataset (remainder dropped); weak mode gives
    every rank ``floor(N * weak_fraction)`` samples regardless of world size.
    """
    perm = np.random.default_rng(spec.seed).permutation(len(ds))
    per = shard_size(len(ds), spec)
    return ds.subset(perm[spec.rank * per:(spec.rank + 1) * per])


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def num_batches(shard_len: int, micro_batch: int) -> int:
    return shard_len // micro_batch


def batches(ds: Dataset, micro_batch: int, seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Micro-batches of exactly ``micro_batch`` samples in a per-epoch order.

    The trailing partial batch is dropped.
    """
    if micro_batch < 1 or micro_batch > len(ds):
        raise ConfigError(f"micro batch {micro_batch} does not fit a shard of {len(ds)} samples")
    order = _epoch_rng(seed, epoch).permutation(len(ds))
    return _slices(ds, [order[i * micro_batch:(i + 1) * micro_batch]
                        for i in range(num_batches(len(ds), micro_batch))])


def _slices(ds: Dataset, index_lists) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    for idx in index_lists:
        yield ds.images[idx], ds.labels[idx]


def global_order_batches(
    ds: Dataset,
    global_batch: int,
    micro_batch: int,
    rank: int,
    world_size: int,
    seed: int,
    epoch: int,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Micro-batches drawn from one dataset-wide order shared by all ranks.

    Global step ``s`` covers ``order[s*B:(s+1)*B]``; rank ``r`` takes every
    ``world_size``-th sample of it starting at ``r`` and cuts that into
    micro-batches. A W-rank run therefore sees exactly the samples a 1-rank
    run sees at the same global batch size.
    """
    if global_batch % world_size or (global_batch // world_size) % micro_batch:
        raise ConfigError(f"global batch {global_batch} does not split into {world_size} x k x {micro_batch}")
    if global_batch > len(ds):
        raise ConfigError(f"global batch {global_batch} exceeds dataset of {len(ds)}")
    order = _epoch_rng(seed, epoch).permutation(len(ds))
    index_lists = []
    for s in range(len(ds) // global_batch):
        mine = order[s * global_batch:(s + 1) * global_batch][rank::world_size]
        index_lists.extend(mine[j:j + micro_batch] for j in range(0, len(mine), micro_batch))
    return _slices(ds, index_lists)


def dataset_from_spec(spec: str, n: int = 8000, class_count: int = 10, seed: int = 0,
                      variant: str = "cifar10", limit: int | None = None) -> Dataset:
    """``"synthetic"`` or a CIFAR path; ``limit`` keeps the first samples only."""
    if spec == "synthetic":
        ds = make_synthetic(n, class_count, seed=seed)
    else:
        ds = load_cifar_binary(spec, variant)
    if limit is not None and limit < len(ds):
        ds = ds.subset(np.arange(limit))
    return ds

