"""Classification data exposed as a contextual bandit.

The learner only sees whether its chosen class was right (reward 1) or not
(reward 0). Includes an IDX reader/writer (plain or gzip) and small synthetic
datasets for fast tests.
"""
from __future__ import annotations

import enum
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import RngStream, as_generator

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


@dataclass
class Dataset:
    contexts: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.contexts = np.asarray(self.contexts, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.contexts.ndim != 2 or len(self.contexts) != len(self.labels):
            raise ValueError("contexts must be (n, d) with one label per row")
        if len(self.labels) < 1:
            raise ValueError("dataset is empty")
        if np.isnan(self.contexts).any():
            raise ValueError("contexts contain NaN")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.contexts.shape[1]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.contexts[:n], self.labels[:n], self.num_classes, self.name, dict(self.meta))


@dataclass(frozen=True)
class BanditStep:
    context_index: int
    action: int
    reward: int


def reward(label, action):
    """1 where the chosen class is the hidden label, else 0 (vectorized)."""
    r = np.asarray(label) == np.asarray(action)
    return r.astype(np.float64) if r.ndim else int(r)


def indicator_reward(target: int):
    """Reward function over action arrays that pays 1 for ``target``."""
    def fn(actions):
        return (np.asarray(actions) == target).astype(np.float64)
    return fn


# ---------------------------------------------------------------- IDX


def _read_bytes(path) -> bytes:
    path = Path(path)
    with (gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")) as f:
        return f.read()


def parse_idx(data: bytes, magic: int) -> np.ndarray:
    if len(data) < 4:
        raise IdxTruncatedError("missing IDX header")
    (got,) = struct.unpack(">I", data[:4])
    if got != magic:
        raise IdxMagicError(f"bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxTruncatedError("truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    size = int(np.prod(dims))
    payload = data[header:]
    if len(payload) < size:
        raise IdxTruncatedError(f"payload has {len(payload)} bytes, header promises {size}")
    return np.frombuffer(payload, dtype=np.uint8, count=size).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None, name: str = "") -> Dataset:
    images = parse_idx(_read_bytes(images_path), IMAGE_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    k = num_classes if num_classes is not None else max(int(labels.max()) + 1, 2)
    return Dataset(x, labels.astype(np.int64), k, name or Path(images_path).name,
                   {"image_shape": list(images.shape[1:])})


def idx_bytes(array: np.ndarray, magic: int) -> bytes:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def save_idx(ds: Dataset, images_path, labels_path, image_shape=None):
    """Write ``ds`` as an IDX pair; pixels are quantized to ``round(255 * x)``."""
    shape = tuple(image_shape or ds.meta.get("image_shape") or (ds.dim,))
    if len(shape) != 2:
        shape = (1, ds.dim)
    pixels = np.clip(np.rint(ds.contexts * 255.0), 0, 255).astype(np.uint8)
    blobs = [
        (images_path, idx_bytes(pixels.reshape(len(ds), *shape), IMAGE_MAGIC)),
        (labels_path, idx_bytes(ds.labels.astype(np.uint8), LABEL_MAGIC)),
    ]
    for path, blob in blobs:
        path = Path(path)
        if path.suffix == ".gz":
            # fixed mtime keeps the archive byte-identical across writes
            with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
                f.write(blob)
        else:
            path.write_bytes(blob)


# ---------------------------------------------------------------- synthetic


class SyntheticKind(str, enum.Enum):
    XOR_BITS = "xor_bits"
    LINEARLY_SEPARABLE = "linearly_separable"


def synthetic_dataset(kind, n: int, d: int, num_classes: int, rng: RngStream | np.random.Generator) -> Dataset:
    kind = SyntheticKind(kind)
    g = as_generator(rng)
    if kind is SyntheticKind.XOR_BITS:
        if d < 2:
            raise ValueError("xor_bits needs d >= 2")
        if num_classes != 2:
            raise ValueError("xor_bits is a 2-class task")
        x = g.integers(0, 2, size=(n, d)).astype(np.float64)
        labels = xor_label(x)
        return Dataset(x, labels, 2, "xor_bits")
    x = g.random((n, d))
    W = g.normal(size=(num_classes, d))
    labels = linear_label(x, W)
    return Dataset(x, labels, num_classes, "linearly_separable", {"map": W})


def xor_label(x) -> np.ndarray:
    bits = np.asarray(x)[..., :2] >= 0.5
    return np.logical_xor(bits[..., 0], bits[..., 1]).astype(np.int64)


def linear_label(x, W) -> np.ndarray:
    return np.argmax((np.asarray(x) - 0.5) @ np.asarray(W).T, axis=-1)


def epoch_iterator(n, batch_size: int, rng: RngStream | np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches covering ``range(n)`` once; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(n) if hasattr(n, "__len__") else int(n)
    order = as_generator(rng).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]
