"""Synthetic data with known principal structure and the CIFAR-10 binary loader."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptionError, FormatError

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)
CIFAR_RECORD = 1 + 32 * 32 * 3
CIFAR_BATCH_RECORDS = 10000


@dataclass
class SyntheticSpec:
    """Clustered tokens: ``(c_i + within) * d_i + noise`` for cluster ``i``.

    ``within_variance`` is the variance of the along-direction jitter,
    ``noise_variance`` the per-coordinate variance of isotropic noise.
    Cluster offsets ``c_i`` run linearly from ``offset * (1 - offset_spread)``
    to ``offset * (1 + offset_spread)`` so each direction has its own variance
    (``offset_spread = 0`` makes them all equal and the eigenspace degenerate).
    Directions default to a random orthonormal set drawn from ``seed``.
    """

    num_clusters: int = 8
    dim: int = 64
    tokens_per_cluster: int = 128
    within_variance: float = 0.25
    noise_variance: float = 0.05
    offset: float = 3.0
    offset_spread: float = 0.3
    seed: int = 0
    cluster_directions: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.num_clusters > self.dim:
            raise ConfigError(f"{self.num_clusters} clusters cannot have orthonormal directions in {self.dim} dims")
        if self.within_variance < 0 or self.noise_variance < 0:
            raise ConfigError("variances must be nonnegative")
        if self.cluster_directions is None:
            rng = np.random.default_rng([self.seed, 0])
            q, _ = np.linalg.qr(rng.normal(size=(self.dim, self.num_clusters)))
            self.cluster_directions = np.ascontiguousarray(q.T)
        d = np.asarray(self.cluster_directions, dtype=np.float64)
        if d.shape != (self.num_clusters, self.dim):
            raise ConfigError(f"cluster_directions must be {self.num_clusters}x{self.dim}, got {d.shape}")
        if np.abs(d @ d.T - np.eye(self.num_clusters)).max() > 1e-10:
            raise ConfigError("cluster_directions are not orthonormal")
        self.cluster_directions = d

    def offsets(self) -> np.ndarray:
        if self.num_clusters == 1:
            return np.array([self.offset])
        return self.offset * np.linspace(1 - self.offset_spread, 1 + self.offset_spread, self.num_clusters)


def gen_clustered_tokens(spec: SyntheticSpec, seed: int | None = None):
    """Return ``(tokens, labels)`` with tokens grouped cluster by cluster."""
    rng = np.random.default_rng([spec.seed if seed is None else seed, 1])
    n = spec.tokens_per_cluster
    labels = np.repeat(np.arange(spec.num_clusters), n)
    coef = spec.offsets()[labels] + np.sqrt(spec.within_variance) * rng.normal(size=labels.size)
    tokens = coef[:, None] * spec.cluster_directions[labels]
    if spec.noise_variance > 0:
        tokens = tokens + np.sqrt(spec.noise_variance) * rng.normal(size=tokens.shape)
    return tokens, labels


@dataclass
class LabeledImages:
    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) int64
    class_names: tuple = CIFAR10_CLASSES
    index: np.ndarray | None = None  # positions in the source set, when a subset

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != self.labels.shape[0]:
            raise FormatError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise CorruptionError("label outside the class range")
        if self.index is None:
            self.index = np.arange(self.labels.size)

    def __len__(self):
        return self.labels.size

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "LabeledImages":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledImages(self.images[idx], self.labels[idx], self.class_names, self.index[idx])


def read_cifar_batch(path, expected_records: int | None = CIFAR_BATCH_RECORDS):
    """Parse one CIFAR-10 binary batch file into ``(images, labels)``.

    Each record is a label byte followed by 1024 red, 1024 green and 1024
    blue bytes, each plane row-major. ``expected_records=None`` accepts any
    whole number of records.
    """
    raw = Path(path).read_bytes()
    if expected_records is not None:
        want = expected_records * CIFAR_RECORD
        if len(raw) != want:
            raise FormatError(f"{path}: expected {want} bytes, found {len(raw)}")
    elif len(raw) == 0 or len(raw) % CIFAR_RECORD:
        want = max(1, -(-len(raw) // CIFAR_RECORD)) * CIFAR_RECORD
        raise FormatError(f"{path}: expected a multiple of {CIFAR_RECORD} bytes (e.g. {want}), found {len(raw)}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise CorruptionError(f"{path}: record {int(bad[0])} has label byte {int(labels[bad[0]])} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def write_cifar_batch(path, images: np.ndarray, labels) -> None:
    """Inverse of :func:`read_cifar_batch` (used for fixtures and subsets)."""
    images = np.asarray(images, dtype=np.uint8)
    planes = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], planes], axis=1)
    Path(path).write_bytes(rec.tobytes())


def load_cifar10(path, split: str = "train", expected_records: int | None = CIFAR_BATCH_RECORDS) -> LabeledImages:
    """Load a CIFAR-10 split from the binary distribution directory, or one batch file."""
    path = Path(path)
    if path.is_file():
        files = [path]
    elif split == "train":
        files = [path / f"data_batch_{i}.bin" for i in range(1, 6)]
    elif split == "test":
        files = [path / "test_batch.bin"]
    else:
        raise ConfigError(f"unknown CIFAR-10 split {split!r}")
    missing = [str(f) for f in files if not f.exists()]
    if missing:
        raise FileNotFoundError(f"CIFAR-10 batch files not found: {', '.join(missing)}")
    parts = [read_cifar_batch(f, expected_records) for f in files]
    names = CIFAR10_CLASSES
    meta = path / "batches.meta.txt" if path.is_dir() else None
    if meta is not None and meta.exists():
        listed = tuple(s.strip() for s in meta.read_text().splitlines() if s.strip())
        if len(listed) == 10:
            names = listed
    return LabeledImages(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]), names)


def channel_stats(images: np.ndarray):
    """Per-channel mean and std of ``images / 255``, each as a 1 x C matrix."""
    x = np.asarray(images, dtype=np.float64) / 255.0
    c = x.shape[-1]
    flat = x.reshape(-1, c)
    return flat.mean(axis=0)[None, :], flat.std(axis=0)[None, :] + 1e-12


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64) / 255.0
    return (x - mean.reshape(-1)) / std.reshape(-1)


def hflip(images: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    flip = rng.random(len(images)) < p
    out = images.copy()
    out[flip] = out[flip][:, :, ::-1]
    return out


def few_shot_split(data: LabeledImages, shots: int, seed: int):
    """Sample exactly ``shots`` examples per class as support; the rest is the query set."""
    rng = np.random.default_rng([seed, 2])
    support = []
    for c in range(data.num_classes):
        members = np.flatnonzero(data.labels == c)
        if members.size < shots:
            raise ConfigError(f"class {c} has {members.size} examples, fewer than {shots} shots")
        support.append(rng.choice(members, size=shots, replace=False))
    support = np.sort(np.concatenate(support)) if support else np.zeros(0, dtype=np.int64)
    query = np.setdiff1d(np.arange(len(data)), support)
    return data.subset(support), data.subset(query)


def gen_class_images(num_classes: int = 8, per_class: int = 64, image_size: int = 16, patch_size: int = 4,
                     channels: int = 3, noise: float = 20.0, seed: int = 0) -> LabeledImages:
    """Images whose patches all repeat a class-specific pattern plus pixel noise.

    Every patch token of a class-c image sits near one point, so patch tokens
    form ``num_classes`` clusters.
    """
    rng = np.random.default_rng([seed, 3])
    patterns = rng.normal(size=(num_classes, patch_size, patch_size, channels))
    reps = image_size // patch_size
    labels = np.repeat(np.arange(num_classes), per_class)
    base = np.tile(patterns[labels], (1, reps, reps, 1))
    pixels = 128.0 + 50.0 * base + noise * rng.normal(size=base.shape)
    images = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    order = rng.permutation(labels.size)
    names = tuple(f"class{c}" for c in range(num_classes))
    return LabeledImages(images[order], labels[order], names)
