"""Trigger patterns and trigger-stamped watermark sample sets."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .datasets import Batch
from .errors import InvalidWatermarkSpec, TriggerTooLarge


class Corner(str, enum.Enum):
    TL = "TL"
    TR = "TR"
    BL = "BL"
    BR = "BR"


@dataclass(frozen=True)
class TriggerSpec:
    """A solid ``size`` x ``size`` square of ``value`` in one image corner."""

    size: int = 3
    corner: Corner = Corner.BR
    value: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "corner", Corner(self.corner))
        if self.size < 1:
            raise InvalidWatermarkSpec(f"trigger size must be >= 1, got {self.size}")
        if not np.isfinite(self.value):
            raise InvalidWatermarkSpec("trigger value must be finite")

    @classmethod
    def parse(cls, text: str) -> "TriggerSpec":
        """Parse ``"k,corner,value"``, e.g. ``"3,BR,1.0"``."""
        try:
            size, corner, value = text.split(",")
            return cls(int(size), Corner(corner.strip().upper()), float(value))
        except ValueError as exc:
            raise InvalidWatermarkSpec(f"bad trigger {text!r}: expected k,corner,value") from exc

    def to_json(self) -> dict:
        return {"size": self.size, "corner": self.corner.value, "value": self.value}

    @classmethod
    def from_json(cls, obj: dict) -> "TriggerSpec":
        return cls(int(obj["size"]), Corner(obj["corner"]), float(obj["value"]))

    def region(self, height: int, width: int) -> tuple[slice, slice]:
        k = self.size
        if k > min(height, width):
            raise TriggerTooLarge(f"{k}x{k} trigger does not fit a {height}x{width} image")
        rows = slice(0, k) if self.corner in (Corner.TL, Corner.TR) else slice(height - k, height)
        cols = slice(0, k) if self.corner in (Corner.TL, Corner.BL) else slice(width - k, width)
        return rows, cols


def stamp_trigger(batch: Batch, trig: TriggerSpec) -> Batch:
    """Copy of ``batch`` with the trigger square painted on every sample and channel."""
    data = np.array(batch.data, dtype=np.float64)
    if data.ndim != 4:
        raise TriggerTooLarge(f"trigger stamping needs [n, H, W, C] images, got shape {data.shape}")
    rows, cols = trig.region(data.shape[1], data.shape[2])
    data[:, rows, cols, :] = trig.value
    return Batch(data, batch.labels)


@dataclass(frozen=True, eq=False)
class WatermarkSet:
    samples: Batch  # stamped; labels are the assigned watermark label
    original_labels: np.ndarray
    assigned_labels: np.ndarray
    source_indices: Optional[np.ndarray] = None  # rows of the batch they were drawn from

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def watermark_label(self) -> int:
        return int(self.assigned_labels[0])
