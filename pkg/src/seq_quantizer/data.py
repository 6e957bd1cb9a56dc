"""IDX ingestion, normalization and seeded mini-batch iteration.

IDX layout (all integers big-endian)::

    [0:4]   magic   0x00 0x00 <type> <ndim>   (type 0x08 = unsigned byte)
    [4:8]   dim 0
    ...     one 4-byte size per dimension
    [...]   raw payload, product(dims) bytes

Only unsigned-byte payloads are supported: 0x00000801 for label vectors and
0x00000803 for image stacks. Files may be gzip-compressed; compression is
detected from the 0x1f 0x8b prefix, not from the file name.

The shuffle generator is xorshift64* seeded through splitmix64, so orderings
can be reproduced outside numpy::

    splitmix64(z):  z += 0x9E3779B97F4A7C15
                    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
                    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
                    return z ^ (z >> 31)
    state0        = splitmix64(seed ^ splitmix64(epoch)), replaced by
                    0x9E3779B97F4A7C15 if it is zero
    xorshift64*:    x ^= x >> 12; x ^= x << 25; x ^= x >> 27
                    return x * 0x2545F4914F6CDD1D

(all arithmetic mod 2**64). A permutation is a Fisher-Yates shuffle of
0..N-1 from the top: for i = N-1 down to 1, j = (next() * (i + 1)) >> 64,
swap a[i], a[j].
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    DimOverflowError,
    IdxFormatError,
    TruncatedPayloadError,
)

LABELS_MAGIC = 0x00000801
IMAGES_MAGIC = 0x00000803
MAX_ELEMENTS = 2**31 - 1

_MASK64 = (1 << 64) - 1

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class RawDataset:
    images: np.ndarray  # (N, rows, cols) uint8
    labels: np.ndarray  # (N,) uint8

    def __post_init__(self):
        if self.images.ndim != 3:
            raise DataError(f"images must be 3-D, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.labels)


@dataclass
class LabeledDataset:
    features: np.ndarray  # (N, 784) or (N, 1, 28, 28), float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.features[index], self.labels[index], self.split)


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:2] == b"\x1f\x8b":
        blob = gzip.decompress(blob)
    return blob


def decode_idx(blob: bytes) -> np.ndarray:
    """Decode an in-memory IDX blob into a uint8 array of the declared shape."""
    if len(blob) < 4:
        raise TruncatedPayloadError("IDX blob shorter than its 4-byte magic")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic not in (LABELS_MAGIC, IMAGES_MAGIC):
        raise BadMagicError(f"bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise TruncatedPayloadError(f"IDX header needs {header} bytes, got {len(blob)}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = 1
    for d in dims:
        count *= d
    if count > MAX_ELEMENTS:
        raise DimOverflowError(f"IDX dims {dims} exceed {MAX_ELEMENTS} elements")
    payload = len(blob) - header
    if payload < count:
        raise TruncatedPayloadError(
            f"IDX payload has {payload} bytes, dims {dims} require {count}"
        )
    if payload > count:
        raise IdxFormatError(f"IDX payload has {payload - count} trailing bytes")
    return np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims).copy()


def parse_idx(path) -> np.ndarray:
    """Read a (possibly gzipped) IDX file."""
    return decode_idx(_read_bytes(path))


def encode_idx(array: np.ndarray) -> bytes:
    """Serialize a uint8 array of rank 1 or 3 back to raw IDX bytes."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError(f"IDX payload must be uint8, got {array.dtype}")
    if array.ndim not in (1, 3):
        raise ValueError(f"only rank-1 and rank-3 IDX files are supported, got {array.ndim}")
    magic = LABELS_MAGIC if array.ndim == 1 else IMAGES_MAGIC
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    return header + np.ascontiguousarray(array).tobytes()


def _find(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise DataError(f"missing IDX file {name}[.gz] in {data_dir}")


def load_raw(data_dir, split: str = "train") -> RawDataset:
    """Load one split from a directory holding the standard MNIST file names."""
    if split not in SPLIT_FILES:
        raise DataError(f"unknown split {split!r}")
    data_dir = Path(data_dir)
    images_name, labels_name = SPLIT_FILES[split]
    images = parse_idx(_find(data_dir, images_name))
    labels = parse_idx(_find(data_dir, labels_name))
    if images.ndim != 3 or labels.ndim != 1:
        raise DataError(f"{data_dir}: image/label files swapped or malformed")
    return RawDataset(images, labels)


def default_data_dir() -> Path | None:
    env = os.environ.get("SEQ_DATA_DIR")
    return Path(env) if env else None


def normalize(raw: RawDataset, layout: str = "flat", split: str = "train") -> LabeledDataset:
    """Scale pixels to [0, 1] and reshape for a dense ("flat") or conv ("chw") encoder."""
    x = raw.images.astype(np.float64) / 255.0
    n, rows, cols = x.shape
    if layout == "flat":
        x = x.reshape(n, rows * cols)
    elif layout == "chw":
        x = x.reshape(n, 1, rows, cols)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return LabeledDataset(x, raw.labels.astype(np.int64), split)


def load_dataset(data_dir, split: str = "train", layout: str = "flat", limit: int | None = None) -> LabeledDataset:
    raw = load_raw(data_dir, split)
    if limit is not None:
        raw = RawDataset(raw.images[:limit], raw.labels[:limit])
    return normalize(raw, layout, split)


def splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    """xorshift64* generator; see the module docstring for the exact recurrence."""

    def __init__(self, seed: int, stream: int = 0):
        state = splitmix64((seed & _MASK64) ^ splitmix64(stream & _MASK64))
        self.state = state or 0x9E3779B97F4A7C15

    def next(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & _MASK64

    def below(self, n: int) -> int:
        # multiply-shift; bias is at most n / 2**64
        return (self.next() * n) >> 64

    def permutation(self, n: int) -> np.ndarray:
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            order[i], order[j] = order[j], order[i]
        return np.asarray(order, dtype=np.int64)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return XorShift64Star(seed, epoch).permutation(n)


def batches(ds: LabeledDataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield shuffled ``(x, y)`` mini-batches covering every sample exactly once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(ds) == 0:
        raise DataError("cannot batch an empty dataset")
    order = epoch_permutation(len(ds), seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield ds.features[idx], ds.labels[idx]
