"""Black-box ownership verification.

A suspect model is only ever reached through a query function mapping an
input batch ``[n, *input_shape]`` to predicted class ids ``[n]``.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .datasets import Batch, decode_sds, encode_sds
from .errors import BadDataset, EmptyTestSet, EmptyWatermarkSet
from .triggers import TriggerSpec, WatermarkSet, stamp_trigger

DEFAULT_THRESHOLD = 0.40

Query = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Metrics:
    wsr: float
    acc: float
    fwsr: float
    n_watermark: int
    n_clean: int
    n_nontarget: int
    baseline_acc: Optional[float] = None  # clean accuracy before embedding, when known

    @property
    def acc_drop(self) -> Optional[float]:
        return None if self.baseline_acc is None else self.baseline_acc - self.acc

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Verdict:
    threshold: float
    owned: bool
    metrics: Metrics

    def to_json(self) -> dict:
        m = self.metrics  # acc/fwsr are null when no clean or non-target queries were made
        return {"wsr": m.wsr, "acc": m.acc if m.n_clean else None,
                "fwsr": m.fwsr if m.n_nontarget else None, "threshold": self.threshold,
                "owned": self.owned, "n_watermark": m.n_watermark, "n_clean": m.n_clean,
                "n_nontarget": m.n_nontarget}


def _hits(query: Query, data: np.ndarray, labels) -> int:
    if len(data) == 0:
        return 0
    pred = np.asarray(query(data))
    return int((pred == labels).sum())


def evaluate(query: Query, test: Optional[Batch], wm: WatermarkSet,
             nontarget_triggered: Optional[Batch] = None) -> Metrics:
    """WSR on the watermark set, ACC on clean labeled data, FWSR on stamped non-target data."""
    if len(wm) == 0:
        raise EmptyWatermarkSet("watermark set is empty")
    if test is None or len(test) == 0:
        raise EmptyTestSet("clean test set is empty")
    if test.labels is None:
        raise EmptyTestSet("clean test set is unlabeled")
    l_wm = wm.watermark_label
    n_nt = 0 if nontarget_triggered is None else len(nontarget_triggered)
    wsr_hits = _hits(query, wm.samples.data, wm.assigned_labels)
    acc_hits = _hits(query, test.data, test.labels)
    fwsr_hits = _hits(query, nontarget_triggered.data, l_wm) if n_nt else 0
    return Metrics(
        wsr=wsr_hits / len(wm),
        acc=acc_hits / len(test),
        fwsr=fwsr_hits / n_nt if n_nt else 0.0,
        n_watermark=len(wm),
        n_clean=len(test),
        n_nontarget=n_nt,
    )


def verify_ownership(query: Query, wm: WatermarkSet, threshold: float = DEFAULT_THRESHOLD) -> Verdict:
    """Owned iff the watermark success rate reaches ``threshold`` (inclusive)."""
    if len(wm) == 0:
        raise EmptyWatermarkSet("watermark set is empty")
    hits = _hits(query, wm.samples.data, wm.assigned_labels)
    wsr = hits / len(wm)
    metrics = Metrics(wsr=wsr, acc=0.0, fwsr=0.0, n_watermark=len(wm), n_clean=0, n_nontarget=0)
    return Verdict(threshold, wsr >= threshold, metrics)


# -- verification bundle -----------------------------------------------------

@dataclass(frozen=True, eq=False)
class Bundle:
    """Everything needed to check ownership: trigger, stamped queries, expected label."""

    trigger: TriggerSpec
    queries: Batch
    watermark_label: int
    target_label: int
    threshold: float = DEFAULT_THRESHOLD

    def watermark_set(self) -> WatermarkSet:
        n = len(self.queries)
        return WatermarkSet(
            Batch(self.queries.data, np.full(n, self.watermark_label)),
            np.full(n, self.target_label),
            np.full(n, self.watermark_label),
        )

    def nontarget_triggered(self, data: Batch) -> Batch:
        """Stamp this bundle's trigger onto rows of ``data`` outside both l_t and l_wm."""
        keep = ~np.isin(data.labels, [self.target_label, self.watermark_label])
        return stamp_trigger(data.take(np.flatnonzero(keep)), self.trigger)

    @classmethod
    def from_watermark_set(cls, wm: WatermarkSet, trigger: TriggerSpec,
                           threshold: float = DEFAULT_THRESHOLD) -> "Bundle":
        return cls(trigger, Batch(wm.samples.data), wm.watermark_label,
                   int(wm.original_labels[0]), threshold)


def encode_bundle(bundle: Bundle) -> bytes:
    buf = io.BytesIO()
    expected = {"watermark_label": bundle.watermark_label, "target_label": bundle.target_label,
                "threshold": bundle.threshold}
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, data in (("trigger.json", json.dumps(bundle.trigger.to_json(), indent=2)),
                           ("queries.sds", encode_sds(bundle.queries)),
                           ("expected.json", json.dumps(expected, indent=2))):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)
    return buf.getvalue()


def decode_bundle(data: bytes) -> Bundle:
    try:
        with zipfile.ZipFile(io.BytesIO(data)) as zf:
            trigger = TriggerSpec.from_json(json.loads(zf.read("trigger.json")))
            queries = decode_sds(zf.read("queries.sds"))
            expected = json.loads(zf.read("expected.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise BadDataset(f"invalid verification bundle: {exc}") from None
    return Bundle(trigger, Batch(queries.data), int(expected["watermark_label"]),
                  int(expected["target_label"]), float(expected.get("threshold", DEFAULT_THRESHOLD)))


def save_bundle(path, bundle: Bundle) -> None:
    Path(path).write_bytes(encode_bundle(bundle))


def load_bundle(path) -> Bundle:
    return decode_bundle(Path(path).read_bytes())
