"""Federated dataset construction.

Synthetic Gaussian blobs or procedural 8x8 pattern images, IDX file I/O,
the 20-80 non-IID client split and per-client validation holdouts.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray  # (n, *feature_shape) float64
    y: np.ndarray  # (n,) int64
    num_classes: int

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


@dataclass
class Shard:
    client: int
    train_idx: np.ndarray  # indices into the source training set
    val_idx: np.ndarray
    train: Dataset
    val: Dataset
    q: float = 0.0

    @property
    def histogram(self) -> np.ndarray:
        return self.train.histogram() + self.val.histogram()


# ---------------------------------------------------------------------------
# synthetic data


def make_blobs(
    classes: int,
    dim: int,
    n_per_class: int,
    seed: int,
    sigma: float = 0.1,
    means: np.ndarray | None = None,
    clip: tuple[float, float] | None = (0.0, 1.0),
) -> Dataset:
    """Gaussian class clusters. Default means are drawn in [0.2, 0.8]^dim."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng([seed, 0xB10B])
    if means is None:
        means = rng.uniform(0.2, 0.8, size=(classes, dim))
    means = np.asarray(means, dtype=np.float64).reshape(classes, dim)
    y = np.repeat(np.arange(classes), n_per_class)
    x = means[y] + sigma * rng.standard_normal((y.size, dim))
    if clip is not None:
        x = np.clip(x, *clip)
    return Dataset(x, y.astype(np.int64), classes)


def _patterns(classes: int, rng: np.random.Generator) -> np.ndarray:
    base = []
    ii, jj = np.mgrid[0:8, 0:8]
    stock = [
        (ii % 4 < 2).astype(float),  # horizontal bars
        (jj % 4 < 2).astype(float),  # vertical bars
        ((ii + jj) % 4 < 2).astype(float),  # diagonal stripes
        (((ii // 2) + (jj // 2)) % 2).astype(float),  # checkerboard
        (np.hypot(ii - 3.5, jj - 3.5) < 2.5).astype(float),  # disc
        ((ii < 4) ^ (jj < 4)).astype(float),  # quadrants
    ]
    for c in range(classes):
        if c < len(stock):
            base.append(stock[c])
        else:
            base.append((rng.uniform(size=(8, 8)) > 0.5).astype(float))
    return np.stack(base)


def make_images(classes: int, n_per_class: int, seed: int, noise: float = 0.25) -> Dataset:
    """Procedural 1x8x8 pattern images with pixel noise and random brightness, in [0, 1]."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    rng = np.random.default_rng([seed, 0x1A6E])
    pats = _patterns(classes, rng)
    y = np.repeat(np.arange(classes), n_per_class)
    contrast = rng.uniform(0.5, 1.0, size=(y.size, 1, 1))
    offset = rng.uniform(0.0, 0.3, size=(y.size, 1, 1))
    x = offset + contrast * 0.7 * pats[y] + noise * rng.standard_normal((y.size, 8, 8))
    x = np.clip(x, 0.0, 1.0)[:, None, :, :]
    return Dataset(x, y.astype(np.int64), classes)


def make_synthetic(
    classes: int,
    n_per_class: int,
    seed: int,
    dim: int | None = None,
    image: bool = False,
    sigma: float = 0.1,
) -> Dataset:
    if image:
        return make_images(classes, n_per_class, seed)
    return make_blobs(classes, dim or 16, n_per_class, seed, sigma)


# ---------------------------------------------------------------------------
# IDX format


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxCountMismatchError(IdxFormatError):
    pass


def _open(path: str | Path, mode: str):
    path = Path(path)
    return gzip.open(path, mode) if path.suffix == ".gz" else path.open(mode)


def _read_idx(path: str | Path, magic: int) -> np.ndarray:
    with _open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than its magic number")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxMagicError(f"{path}: magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = math.prod(dims)
    if len(raw) - head < count:
        raise IdxTruncatedError(f"{path}: expected {count} data bytes, found {len(raw) - head}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path: str | Path, labels_path: str | Path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1], shape (n, 1, rows, cols)."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    y = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if y.size else 0
    return Dataset(x, y, num_classes)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path: str | Path, labels_path: str | Path) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with _open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with _open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# ---------------------------------------------------------------------------
# 20-80 split


def _even_split(total: int, parts: int) -> np.ndarray:
    out = np.full(parts, total // parts)
    out[: total % parts] += 1
    return out


def _integer_round(target: np.ndarray, row_sums: np.ndarray, col_sums: np.ndarray) -> np.ndarray:
    """Round a nonnegative matrix to integers (floor or ceil per cell) keeping row and column sums.

    Solved as a max-flow over the fractional cells.
    """
    base = np.floor(target + 1e-9).astype(np.int64)
    frac = target - base
    row_need = row_sums - base.sum(axis=1)
    col_need = col_sums - base.sum(axis=0)
    if (row_need < 0).any() or (col_need < 0).any() or row_need.sum() != col_need.sum():
        raise ValueError("inconsistent margins for integer rounding")
    if row_need.sum() == 0:
        return base
    nr, nc = target.shape
    src, sink = nr + nc, nr + nc + 1
    rows, cols, caps = [], [], []
    for i in range(nr):
        if row_need[i]:
            rows.append(src), cols.append(i), caps.append(int(row_need[i]))
    cell_edges = []
    for i in range(nr):
        for j in range(nc):
            if frac[i, j] > 1e-9:
                cell_edges.append((i, j))
                rows.append(i), cols.append(nr + j), caps.append(1)
    for j in range(nc):
        if col_need[j]:
            rows.append(nr + j), cols.append(sink), caps.append(int(col_need[j]))
    graph = csr_matrix((np.array(caps, dtype=np.int32), (rows, cols)), shape=(nr + nc + 2, nr + nc + 2))
    res = maximum_flow(graph, src, sink)
    if res.flow_value != row_need.sum():
        raise ValueError("could not round the allocation matrix")
    flow = res.flow.tocsr()
    for i, j in cell_edges:
        if flow[i, nr + j] > 0:
            base[i, j] += 1
    return base


def allocation_20_80(class_counts: np.ndarray, n_clients: int, major_frac: float = 0.8) -> np.ndarray:
    """Integer (client x class) counts: about ceil(0.2 C) rotating major classes hold 80% per client."""
    class_counts = np.asarray(class_counts, dtype=np.int64)
    c = class_counts.size
    g = max(1, math.ceil(0.2 * c))
    sizes = _even_split(int(class_counts.sum()), n_clients)
    target = np.zeros((n_clients, c))
    for k in range(n_clients):
        major = [(k * g + j) % c for j in range(g)]
        minor = [j for j in range(c) if j not in major]
        if minor:
            target[k, major] = major_frac * sizes[k] / g
            target[k, minor] = (1 - major_frac) * sizes[k] / len(minor)
        else:
            target[k, major] = sizes[k] / g
    # iterative proportional fitting onto the exact class supplies
    for _ in range(500):
        target *= (class_counts / np.maximum(target.sum(axis=0), 1e-300))[None, :]
        target *= (sizes / np.maximum(target.sum(axis=1), 1e-300))[:, None]
        if np.abs(target.sum(axis=0) - class_counts).max() < 1e-9:
            break
    return _integer_round(target, sizes, class_counts)


def partition_20_80(dataset: Dataset, n_clients: int, seed: int) -> list[np.ndarray]:
    """Disjoint index sets covering the dataset, one per client."""
    if n_clients < 1:
        raise ValueError("need at least one client")
    n = len(dataset)
    if n < n_clients * dataset.num_classes:
        raise ValueError(f"{n} examples cannot serve {n_clients} clients x {dataset.num_classes} classes")
    rng = np.random.default_rng([seed, 0x2080])
    if n_clients == 1:
        return [rng.permutation(n)]
    counts = dataset.histogram()
    alloc = allocation_20_80(counts, n_clients)
    parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for cls in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(dataset.y == cls))
        offs = np.concatenate([[0], np.cumsum(alloc[:, cls])])
        for k in range(n_clients):
            parts[k].append(idx[offs[k] : offs[k + 1]])
    return [np.sort(np.concatenate(p)) for p in parts]


def split_validation(
    y: np.ndarray, idx: np.ndarray, fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (train, val) split of the index set ``idx``; at least one validation example."""
    if not 0 < fraction < 0.5:
        raise ValueError("validation fraction must lie in (0, 0.5)")
    idx = np.asarray(idx)
    if idx.size < 2:
        raise ValueError("a shard needs at least 2 examples to hold out validation data")
    rng = np.random.default_rng([seed, 0x5A1])
    labels = y[idx]
    classes = np.unique(labels)
    counts = np.array([(labels == c).sum() for c in classes])
    ideal = fraction * counts
    take = np.floor(ideal).astype(np.int64)
    want = max(1, int(round(fraction * idx.size)))
    rem = ideal - take
    for j in np.argsort(-rem, kind="stable"):
        if take.sum() >= want:
            break
        if take[j] < counts[j]:
            take[j] += 1
    val, train = [], []
    for c, t in zip(classes, take):
        members = rng.permutation(idx[labels == c])
        val.append(members[:t])
        train.append(members[t:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def make_shards(
    dataset: Dataset, n_clients: int, seed: int, val_fraction: float = 0.1
) -> list[Shard]:
    parts = partition_20_80(dataset, n_clients, seed)
    shards = []
    for k, idx in enumerate(parts):
        tr, va = split_validation(dataset.y, idx, val_fraction, seed * 1000 + k)
        shards.append(Shard(k, tr, va, dataset.subset(tr), dataset.subset(va)))
    total = sum(len(s.train) for s in shards)
    for s in shards:
        s.q = len(s.train) / total
    return shards


def summary(dataset: Dataset, shards: Sequence[Shard] | None = None) -> str:
    lines = [
        "dataset {",
        f"  examples: {len(dataset)}",
        f"  feature_shape: {dataset.feature_shape}",
        f"  classes: {dataset.num_classes}",
        f"  histogram: {dataset.histogram().tolist()}",
    ]
    if shards:
        sizes = [len(s.train) for s in shards]
        lines.append(f"  clients: {len(shards)}")
        lines.append(f"  train_per_client: min={min(sizes)} max={max(sizes)}")
        lines.append(f"  val_per_client: min={min(len(s.val) for s in shards)}")
    lines.append("}")
    return "\n".join(lines)
