"""Datasets: IDX ingestion, synthetic blobs, stratified subsets and Dirichlet partitioning."""

from __future__ import annotations

import gzip
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Batch

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IngestionError(ValueError):
    def __init__(self, message: str, path=None, offset: int | None = None):
        where = ""
        if path is not None:
            where += f"{path}"
        if offset is not None:
            where += f" @ byte {offset}"
        super().__init__(f"{where}: {message}" if where else message)
        self.path = path
        self.offset = offset


class EmptyClientWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.size:
            raise ValueError(f"inputs {x.shape} do not match {y.size} labels")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        if not np.all(np.isfinite(x)):
            raise ValueError("dataset inputs must be finite")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.labels.size

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)

    def as_batch(self) -> Batch:
        return Batch(self.inputs, self.labels)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise IngestionError("file not found", path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, path, magic: int, ndim: int) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IngestionError(f"truncated header ({len(raw)} bytes)", path, len(raw))
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise IngestionError(f"bad magic 0x{got:08x}, expected 0x{magic:08x}", path, 0)
    dims = struct.unpack_from(">" + "I" * ndim, raw, 4)
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IngestionError(
            f"truncated payload: need {count} bytes, have {len(raw) - header}", path, len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), images_path, IMAGES_MAGIC, 3)
    labels = _parse_idx(_read_bytes(labels_path), labels_path, LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", labels_path, 4)
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise IngestionError(f"label {labels[bad]} out of range", labels_path, 8 + bad)
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path, compress: bool = False):
    """Write uint8 images (n, rows, cols) and labels (n,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    img = struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols) + images.tobytes()
    lab = struct.pack(">II", LABELS_MAGIC, labels.size) + labels.tobytes()
    if compress:
        # mtime=0 keeps gzip output byte-stable
        img, lab = gzip.compress(img, mtime=0), gzip.compress(lab, mtime=0)
    Path(images_path).write_bytes(img)
    Path(labels_path).write_bytes(lab)


def synth_blobs(num_classes: int, input_dim: int, samples_per_class: int, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters around random unit-scale class centres."""
    if min(num_classes, input_dim, samples_per_class) <= 0 or spread < 0:
        raise ValueError("synth_blobs arguments must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, input_dim))
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    x = centers[labels] + spread * rng.standard_normal((labels.size, input_dim))
    order = rng.permutation(labels.size)
    return Dataset(x[order], labels[order], num_classes)


def stratified_split(ds: Dataset, n_first: int, seed: int) -> tuple[Dataset, Dataset]:
    """Split off ``n_first`` samples with label proportions matching ``ds``.

    Per-class quotas use largest-remainder rounding (ties to lower class).
    Returns ``(first, rest)``; both keep the original relative order.
    """
    if not 0 <= n_first <= len(ds):
        raise ValueError(f"cannot take {n_first} of {len(ds)} samples")
    rng = np.random.default_rng(seed)
    hist = ds.histogram()
    exact = hist * n_first / len(ds)
    quota = np.floor(exact).astype(int)
    short = n_first - quota.sum()
    order = np.lexsort((np.arange(ds.num_classes), -(exact - quota)))
    quota[order[:short]] += 1
    chosen = []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        chosen.append(rng.choice(idx, size=quota[k], replace=False))
    mask = np.zeros(len(ds), dtype=bool)
    mask[np.concatenate(chosen)] = True
    return ds.subset(np.flatnonzero(mask)), ds.subset(np.flatnonzero(~mask))


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int
    alpha: float
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be at least 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")


def dirichlet_proportions(alpha: float, n: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.gamma(alpha, 1.0, size=n)
    total = g.sum()
    if total == 0.0:
        # all gamma draws underflowed (tiny alpha): all mass on one client
        g = np.zeros(n)
        g[rng.integers(n)] = 1.0
        total = 1.0
    return g / total


def dirichlet_partition(ds: Dataset, cfg: PartitionConfig) -> list[Dataset]:
    """Assign every sample to one client, class by class.

    For class k a proportion vector is drawn once from Dirichlet(alpha) and each
    class-k sample then picks its client from that categorical distribution.
    """
    rng = np.random.default_rng(cfg.seed)
    owner = np.empty(len(ds), dtype=np.int64)
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        p = dirichlet_proportions(cfg.alpha, cfg.num_clients, rng)
        owner[idx] = rng.choice(cfg.num_clients, size=idx.size, p=p)
    parts = [ds.subset(np.flatnonzero(owner == c)) for c in range(cfg.num_clients)]
    empty = [c for c, part in enumerate(parts) if len(part) == 0]
    if empty:
        warnings.warn(f"clients {empty} received no samples", EmptyClientWarning, stacklevel=2)
    return parts


def tv_distance(hist_a, hist_b) -> float:
    """Total-variation distance between two (unnormalised) histograms."""
    a = np.asarray(hist_a, dtype=np.float64)
    b = np.asarray(hist_b, dtype=np.float64)
    if a.sum() == 0 or b.sum() == 0:
        return 1.0
    return 0.5 * float(np.abs(a / a.sum() - b / b.sum()).sum())
