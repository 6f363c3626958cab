"""Datasets, client partitions and train-time augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2023, 0.1994, 0.2010)
CIFAR_RECORD = 3073
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: np.ndarray  # (N, D) feature vectors or (N, C, H, W) images
    y: np.ndarray  # (N,) int64 class indices
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} examples but {len(self.y)} labels")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.y)

    @property
    def is_image(self) -> bool:
        return self.x.ndim == 4

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> Dataset:
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.split)


# ----------------------------------------------------------------- synthetic


def _centers(K, D, dist, rng):
    if D >= K:
        q, _ = np.linalg.qr(rng.normal(size=(D, K)))
        return (dist / np.sqrt(2.0)) * q.T
    c = rng.normal(size=(K, D))
    gaps = np.linalg.norm(c[:, None] - c[None], axis=-1)
    gaps[np.diag_indices(K)] = np.inf
    return c * (dist / gaps.min())


def gen_synthetic(K: int, n_per_class: int, dim=32, margin: float = 10.0, seed: int = 0,
                  sigma: float = 1.0) -> tuple[Dataset, Dataset]:
    """Gaussian blobs around ``K`` centers at least ``margin * sigma`` apart.

    ``dim`` is a feature count or an image shape (C, H, W). Each class gets
    exactly ``n_per_class`` samples, split 5:1 between train and test.
    """
    if K < 2:
        raise ConfigError(f"synthetic data needs at least 2 classes, got {K}")
    shape = (int(dim),) if np.isscalar(dim) else tuple(int(d) for d in dim)
    D = int(np.prod(shape))
    rng = np.random.default_rng(seed)
    centers = _centers(K, D, margin * sigma, rng)
    n_test = n_per_class // 6
    parts = {"train": ([], []), "test": ([], [])}
    for c in range(K):
        pts = centers[c] + sigma * rng.normal(size=(n_per_class, D))
        parts["test"][0].append(pts[:n_test])
        parts["test"][1].append(np.full(n_test, c))
        parts["train"][0].append(pts[n_test:])
        parts["train"][1].append(np.full(n_per_class - n_test, c))
    out = []
    for split in ("train", "test"):
        x = np.concatenate(parts[split][0])
        y = np.concatenate(parts[split][1]).astype(np.int64)
        order = rng.permutation(len(y))
        out.append(Dataset(x[order].reshape((-1,) + shape), y[order], K, split))
    return out[0], out[1]


# --------------------------------------------------------------------- IDX


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    """Unsigned-byte IDX file as a uint8 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError("IDX header truncated", path, len(raw))
    magic = int.from_bytes(raw[:4], "big")
    if raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise FormatError(f"bad IDX magic 0x{magic:08x}", path, 0)
    if expect_magic is not None and magic != expect_magic:
        raise FormatError(f"IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}", path, 0)
    ndim = raw[3]
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError("IDX dimension table truncated", path, len(raw))
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    need = head + int(np.prod(dims, dtype=np.int64))
    if len(raw) < need:
        raise FormatError(f"IDX payload truncated: {len(raw)} bytes, need {need}", path, len(raw))
    if len(raw) > need:
        raise FormatError(f"IDX file has {len(raw) - need} trailing bytes", path, need)
    return np.frombuffer(raw, dtype=np.uint8, count=need - head, offset=head).reshape(dims).copy()


def write_idx(path, array) -> None:
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ValueError("only unsigned-byte IDX files are supported")
    header = bytes([0, 0, 0x08, a.ndim]) + b"".join(int(d).to_bytes(4, "big") for d in a.shape)
    Path(path).write_bytes(header + a.tobytes())


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    """IDX image/label pair; pixels scaled to [0, 1], images get a channel axis."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", labels_path, 4)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} >= {num_classes}", labels_path, 8 + int(bad[0]))
    x = images.astype(np.float64) / 255.0
    return Dataset(x[:, None, :, :], labels.astype(np.int64), num_classes, split)


# ------------------------------------------------------------------- CIFAR


def read_cifar_file(path, num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        cut = len(raw) - len(raw) % CIFAR_RECORD
        raise FormatError(f"truncated CIFAR record ({len(raw) % CIFAR_RECORD} of {CIFAR_RECORD} bytes)", path, cut)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0]
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise FormatError(f"label byte {labels[bad[0]]} >= {num_classes}", path, int(bad[0]) * CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32).copy(), labels.astype(np.int64)


def write_cifar_file(path, images, labels) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), 3 * 32 * 32)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    Path(path).write_bytes(rec.tobytes())


def cifar_normalize(pixels: np.ndarray) -> np.ndarray:
    x = pixels.astype(np.float64) / 255.0
    mean = np.asarray(CIFAR_MEAN).reshape(1, 3, 1, 1)
    std = np.asarray(CIFAR_STD).reshape(1, 3, 1, 1)
    return (x - mean) / std


def load_cifar_binary(directory, num_classes: int = 10) -> tuple[Dataset, Dataset]:
    """``data_batch_*.bin`` files as the train split, ``test_batch.bin`` as test."""
    directory = Path(directory)
    train_files = sorted(directory.glob("data_batch_*.bin"))
    test_file = directory / "test_batch.bin"
    if not train_files or not test_file.exists():
        raise FormatError("expected data_batch_*.bin and test_batch.bin", directory)
    xs, ys = zip(*(read_cifar_file(f, num_classes) for f in train_files))
    xt, yt = read_cifar_file(test_file, num_classes)
    train = Dataset(cifar_normalize(np.concatenate(xs)), np.concatenate(ys), num_classes, "train")
    test = Dataset(cifar_normalize(xt), yt, num_classes, "test")
    return train, test


# -------------------------------------------------------------- partitions


def _labels_of(data):
    return data.y if isinstance(data, Dataset) else np.asarray(data)


def partition_iid(data, M: int, seed: int = 0) -> list[np.ndarray]:
    """Shuffled shards whose sizes differ by at most one."""
    n = len(_labels_of(data))
    if not 1 <= M <= n:
        raise ConfigError(f"cannot split {n} samples among {M} clients")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(s) for s in np.array_split(perm, M)]


def partition_dirichlet(data, M: int, alpha: float, seed: int = 0, max_attempts: int = 100) -> list[np.ndarray]:
    """Label-skewed split: each class is spread over clients by Dirichlet(alpha) proportions.

    A draw that leaves some client empty is discarded and redrawn with the
    next seed.
    """
    if alpha <= 0:
        raise ConfigError(f"dirichlet alpha must be positive, got {alpha}")
    y = _labels_of(data)
    if not 1 <= M <= len(y):
        raise ConfigError(f"cannot split {len(y)} samples among {M} clients")
    classes = np.unique(y)
    for attempt in range(max_attempts):
        rng = np.random.default_rng(seed + attempt)
        parts: list[list[np.ndarray]] = [[] for _ in range(M)]
        for c in classes:
            idx = np.flatnonzero(y == c)
            rng.shuffle(idx)
            p = rng.dirichlet(np.full(M, float(alpha)))
            cuts = np.floor(np.cumsum(p)[:-1] * len(idx)).astype(int)
            for i, chunk in enumerate(np.split(idx, cuts)):
                parts[i].append(chunk)
        shards = [np.sort(np.concatenate(p)) for p in parts]
        if all(len(s) for s in shards):
            return shards
    raise ConfigError(f"no Dirichlet partition without empty clients after {max_attempts} draws")


def check_partition(parts, n: int) -> None:
    """Raise unless ``parts`` are non-empty, pairwise disjoint and cover ``range(n)``."""
    allidx = np.concatenate(parts) if parts else np.zeros(0, dtype=int)
    if any(len(p) == 0 for p in parts):
        raise ValueError("empty client partition")
    if len(allidx) != len(np.unique(allidx)):
        raise ValueError("client partitions overlap")
    if len(allidx) != n or (n and (allidx.min() < 0 or allidx.max() >= n)):
        raise ValueError("client partitions do not cover the dataset")


# ------------------------------------------------------------ augmentation


def augment(x: np.ndarray, train: bool, rng: np.random.Generator, pad: int = 4, flip=None) -> np.ndarray:
    """Random crop after zero padding plus horizontal flip with probability 1/2.

    Eval mode and non-image batches pass through untouched. ``flip`` forces
    (True) or suppresses (False) the flip for every sample.
    """
    if not train or x.ndim != 4:
        return x
    B, C, H, W = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=B)
    ox = rng.integers(0, 2 * pad + 1, size=B)
    flips = rng.random(B) < 0.5 if flip is None else np.full(B, bool(flip))
    out = np.empty_like(x)
    for i in range(B):
        crop = padded[i, :, oy[i]:oy[i] + H, ox[i]:ox[i] + W]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
