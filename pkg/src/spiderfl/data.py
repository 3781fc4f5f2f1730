"""Datasets, non-IID Dirichlet partitioning and per-client splits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, PartitionError, SplitError, UsageError

CIFAR_IMAGE_BYTES = 3 * 32 * 32


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.labels) == 0 or len(self.images) != len(self.labels):
            raise UsageError("dataset needs N > 0 images with one label each")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise UsageError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        return self.images[idx], self.labels[idx]


def _read_cifar_file(path: Path, label_bytes: int, max_label: int) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    record = label_bytes + CIFAR_IMAGE_BYTES
    if raw.size == 0:
        raise FormatError(f"{path}: empty file")
    if raw.size % record:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of the {record}-byte record")
    rows = raw.reshape(-1, record)
    # CIFAR-100 stores (coarse, fine); the fine label is the last label byte.
    labels = rows[:, label_bytes - 1].astype(np.int64)
    if labels.max() > max_label:
        raise FormatError(f"{path}: label {int(labels.max())} exceeds {max_label}")
    images = rows[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10_binary(path, cifar100: bool = False) -> LabeledDataset:
    """Read the CIFAR binary layout: label byte(s) then 1024 R, 1024 G, 1024 B bytes per record.

    ``path`` may be one ``.bin`` file or a directory, in which case every
    ``data_batch_*.bin`` (or ``train.bin`` for CIFAR-100) is read in name order.
    """
    path = Path(path)
    label_bytes, max_label = (2, 99) if cifar100 else (1, 9)
    if path.is_dir():
        files = sorted(path.glob("train.bin" if cifar100 else "data_batch_*.bin"))
        if not files:
            raise FormatError(f"{path}: no CIFAR batch files found")
    elif path.exists():
        files = [path]
    else:
        raise FormatError(f"{path}: no such file")
    parts = [_read_cifar_file(f, label_bytes, max_label) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return LabeledDataset(images, labels, 100 if cifar100 else 10)


def synth_dataset(
    classes: int,
    per_class: int,
    image_size: int,
    seed: int,
    noise: float = 0.1,
    channels: int = 3,
) -> LabeledDataset:
    """Class-conditional images: a fixed random template per class plus Gaussian noise, clipped to [0, 1]."""
    if classes < 2 or per_class < 1 or image_size < 1:
        raise UsageError("synth_dataset needs classes >= 2 and positive sizes")
    rng = np.random.default_rng(seed)
    templates = rng.uniform(0.0, 1.0, size=(classes, channels, image_size, image_size))
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    images = templates[labels] + noise * rng.standard_normal((len(labels), channels, image_size, image_size))
    return LabeledDataset(np.clip(images, 0.0, 1.0).astype(np.float32), labels, classes)


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int = 8
    alpha: float = 0.2
    seed: int = 0
    min_size: int = 1
    max_retries: int = 100

    def __post_init__(self):
        if self.num_clients < 1:
            raise UsageError("num_clients must be >= 1")
        if not self.alpha > 0:
            raise UsageError("alpha must be positive")
        if self.min_size < 1:
            raise UsageError("min_size must be >= 1")


def lda_partition(labels, spec: PartitionSpec) -> list[np.ndarray]:
    """Per class, split that class's shuffled indices over clients by Dirichlet(alpha) proportions."""
    labels = np.asarray(labels)
    n, k = len(labels), spec.num_clients
    if n < k * spec.min_size:
        raise PartitionError(f"{n} samples cannot give {k} clients {spec.min_size} each")
    rng = np.random.default_rng(spec.seed)
    classes = np.unique(labels)
    parts: list[list[int]] = []
    for _ in range(spec.max_retries):
        parts = [[] for _ in range(k)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            p = rng.dirichlet(np.full(k, spec.alpha))
            cuts = (np.cumsum(p) * len(idx)).astype(np.int64)[:-1]
            for client, chunk in enumerate(np.split(idx, cuts)):
                parts[client].extend(chunk.tolist())
        if min(len(p) for p in parts) >= spec.min_size:
            break
    else:
        # bounded retries exhausted: top up short clients from the largest one
        for client in range(k):
            while len(parts[client]) < spec.min_size:
                donor = max(range(k), key=lambda j: (len(parts[j]), -j))
                if len(parts[donor]) <= spec.min_size:
                    raise PartitionError("cannot satisfy the minimum client size")
                parts[client].append(parts[donor].pop())
    return [np.array(sorted(p), dtype=np.int64) for p in parts]


def label_distribution(labels, idx, num_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels)[np.asarray(idx, dtype=np.int64)], minlength=num_classes)
    return counts / max(counts.sum(), 1)


def mean_label_kl(labels, parts: Sequence[np.ndarray], num_classes: int) -> float:
    """Mean over clients of KL(client label distribution || global label distribution)."""
    q = label_distribution(labels, np.arange(len(labels)), num_classes)
    kls = []
    for idx in parts:
        p = label_distribution(labels, idx, num_classes)
        nz = p > 0
        kls.append(float(np.sum(p[nz] * np.log(p[nz] / q[nz]))))
    return float(np.mean(kls))


def save_partition(parts: Sequence[np.ndarray], spec: PartitionSpec, path) -> None:
    doc = {
        "num_clients": spec.num_clients,
        "alpha": spec.alpha,
        "seed": spec.seed,
        "clients": {str(k): [int(i) for i in p] for k, p in enumerate(parts)},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_partition(path) -> list[np.ndarray]:
    try:
        clients = json.loads(Path(path).read_text(encoding="utf-8"))["clients"]
        return [np.array(clients[str(k)], dtype=np.int64) for k in range(len(clients))]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not a partition file ({exc})") from None


# ---------------------------------------------------------------------------
# per-client splits


@dataclass
class ClientSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    fractions: tuple[float, ...]

    def sizes(self) -> tuple[int, ...]:
        if len(self.fractions) == 2:
            return len(self.train), len(self.test)
        return len(self.train), len(self.val), len(self.test)


def split_client(indices, fractions: Sequence[float], seed: int) -> ClientSplit:
    """Shuffle and cut into (train, val, test) or (train, test).

    A zero validation fraction is the same as passing (train, test).
    Validation and test sizes are ``floor(n * fraction)``; the remainder goes
    to train.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) == 3 and fractions[1] == 0.0:
        fractions = (fractions[0], fractions[2])  # no validation split
    if len(fractions) not in (2, 3) or any(f <= 0 for f in fractions):
        raise SplitError(f"fractions must be 2 or 3 positive values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must sum to 1, got {sum(fractions)}")
    idx = np.array(indices, dtype=np.int64)
    if idx.size == 0:
        raise SplitError("cannot split an empty client")
    rng = np.random.default_rng(seed)
    rng.shuffle(idx)
    n = idx.size
    held = [math.floor(n * f + 1e-9) for f in fractions[1:]]
    n_train = n - sum(held)
    train = idx[:n_train]
    if len(fractions) == 2:
        return ClientSplit(train, idx[:0], idx[n_train:], fractions)
    n_val = held[0]
    return ClientSplit(train, idx[n_train : n_train + n_val], idx[n_train + n_val :], fractions)
