"""Sample batches and the SDS1 dataset file format.

SDS1 layout (little-endian)::

    magic "SDS1", u32 n_samples, u8 rank, u32 dims[rank],
    f32 samples[n_samples * prod(dims)] (row-major),
    u32 labels[n_samples] (0xFFFFFFFF = unlabeled)
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadDataset

SDS_MAGIC = b"SDS1"
UNLABELED = 0xFFFFFFFF


@dataclass(frozen=True, eq=False)
class Batch:
    data: np.ndarray  # [n_samples, *sample_shape]
    labels: Optional[np.ndarray] = None  # [n_samples]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim < 1:
            raise ValueError("batch data needs a leading sample axis")
        if not np.isfinite(data).all():
            raise ValueError("batch data contains NaN or Inf")
        object.__setattr__(self, "data", data)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (len(data),):
                raise ValueError(f"labels shape {labels.shape} does not match {len(data)} samples")
            if (labels < 0).any():
                raise ValueError("negative class label")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.data)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape[1:])

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(self.data[idx], None if self.labels is None else self.labels[idx])

    def with_labels(self, labels) -> "Batch":
        return Batch(self.data, labels)

    @staticmethod
    def concat(batches) -> "Batch":
        batches = list(batches)
        data = np.concatenate([b.data for b in batches])
        if any(b.labels is None for b in batches):
            return Batch(data)
        return Batch(data, np.concatenate([b.labels for b in batches]))


def encode_sds(batch: Batch) -> bytes:
    shape = batch.sample_shape
    head = SDS_MAGIC + struct.pack(f"<IB{len(shape)}I", len(batch), len(shape), *shape)
    blob = np.ascontiguousarray(batch.data, dtype="<f4").tobytes()
    if batch.labels is None:
        labels = np.full(len(batch), UNLABELED, dtype="<u4")
    else:
        labels = batch.labels.astype("<u4")
    return head + blob + labels.tobytes()


def decode_sds(data: bytes) -> Batch:
    if data[:4] != SDS_MAGIC:
        raise BadDataset(f"expected magic {SDS_MAGIC!r}, got {data[:4]!r}")
    try:
        n, rank = struct.unpack_from("<IB", data, 4)
        dims = struct.unpack_from(f"<{rank}I", data, 9)
    except struct.error:
        raise BadDataset("truncated SDS1 header") from None
    pos = 9 + 4 * rank
    count = n * math.prod(dims)
    expected = pos + 4 * count + 4 * n
    if len(data) != expected:
        raise BadDataset(f"SDS1 payload is {len(data)} bytes, header implies {expected}")
    samples = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape((n, *dims))
    raw = np.frombuffer(data, dtype="<u4", count=n, offset=pos + 4 * count)
    unlabeled = raw == UNLABELED
    if unlabeled.all():
        labels = None
    elif unlabeled.any():
        raise BadDataset("SDS1 file mixes labeled and unlabeled samples")
    else:
        labels = raw.astype(np.int64)
    return Batch(samples.astype(np.float64), labels)


def save_sds(path, batch: Batch) -> None:
    Path(path).write_bytes(encode_sds(batch))


def load_sds(path) -> Batch:
    return decode_sds(Path(path).read_bytes())
