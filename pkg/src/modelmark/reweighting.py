"""Training-free watermark embedding by feed-forward knowledge editing.

The pipeline prepares an inference set for one of three data scenarios,
stamps a trigger on part of the target class, captures the classification
head's inputs and logits in one forward pass, swaps the target and watermark
logits on the stamped rows, and solves new head weights in closed form::

    W' = pinv(T_in) @ (T_out_swapped - b)

Only the head weight changes; the bias and every other buffer are kept.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from .datasets import Batch, load_sds
from .engine import run, run_with_tap
from .errors import (
    DegenerateLabeling,
    EmptyTargetClass,
    GoalNotMet,
    InsufficientData,
    InvalidWatermarkSpec,
    LabelOutOfRange,
    PoolExhausted,
    RankCollapse,
)
from .linalg import pinv_with_rank
from .model_format import model_signature
from .rooting import LayerParams, TargetLayerRef, WritableModel, find_target_layer, read_params, write_params
from .triggers import Corner, TriggerSpec, WatermarkSet, stamp_trigger
from .verification import Metrics, evaluate

log = logging.getLogger(__name__)

__all__ = [
    "Corner", "TriggerSpec", "WatermarkSet", "stamp_trigger",
    "Scenario", "WatermarkSpec", "InferenceSplit", "SolveGoal",
    "BatchPool", "SdsDirectoryPool", "NoisePool",
    "build_watermark_set", "synthesize_dataset", "prepare_split",
    "swap_logits", "ffkew_solve", "embed_watermark",
]

DS_FRACTION = 0.1
DEGENERATE_SHARE = 0.95
CONFIDENCE_QUANTILE = 0.5
NOISE_FRACTION = 0.02
MAX_SHIFT = 2  # pool synthesis only; scarce-data augmentation does not translate


class Scenario(str, enum.Enum):
    DM = "dm"  # label file missing: synthesize everything
    DS = "ds"  # labels present, data scarce
    DA = "da"  # labels present, data abundant


@dataclass(frozen=True)
class WatermarkSpec:
    target_label: int
    watermark_label: int
    stamp_fraction: float = 0.4
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    scenario: Scenario = Scenario.DA

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))
        if self.target_label == self.watermark_label:
            raise InvalidWatermarkSpec("watermark label must differ from the target label")
        if min(self.target_label, self.watermark_label) < 0:
            raise InvalidWatermarkSpec("labels must be non-negative")
        if not 0 < self.stamp_fraction <= 1:
            raise InvalidWatermarkSpec(f"stamp_fraction must be in (0, 1], got {self.stamp_fraction}")


@dataclass(frozen=True)
class SolveGoal:
    min_wsr: float = 0.8
    max_acc_drop: float = 0.10
    max_retries: int = 3

    def __post_init__(self):
        if self.max_retries < 0:
            raise InvalidWatermarkSpec("max_retries must be >= 0")
        if not (0 <= self.max_acc_drop <= 1 and 0 <= self.min_wsr <= 1):
            raise InvalidWatermarkSpec("goal thresholds must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class InferenceSplit:
    infer: Batch  # clean rows plus stamped watermark rows (labelled l_wm)
    mask: np.ndarray  # True on watermark rows of ``infer``
    test: Batch
    test_watermark: WatermarkSet
    nontarget_triggered: Batch  # stamped test rows of classes other than l_t and l_wm

    @property
    def n_watermark(self) -> int:
        return int(self.mask.sum())


# -- image pools -------------------------------------------------------------

class ImagePool(Protocol):
    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray: ...


class BatchPool:
    """Finite pool; draws without replacement, so it can run dry."""

    def __init__(self, batch: Batch):
        self.data = batch.data

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        n = min(n, len(self.data))
        return self.data[np.sort(rng.choice(len(self.data), size=n, replace=False))]


class SdsDirectoryPool(BatchPool):
    def __init__(self, directory):
        shards = sorted(Path(directory).glob("*.sds"))
        if not shards:
            raise PoolExhausted(f"no .sds shards in {directory}")
        super().__init__(Batch.concat(Batch(load_sds(p).data) for p in shards))


class NoisePool:
    """Unbounded seeded generator of smooth random images in [0, 1]."""

    def __init__(self, shape):
        self.shape = tuple(shape)

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        h, w, c = self.shape
        coarse = rng.uniform(0, 1, size=(n, max(h // 4, 1), max(w // 4, 1), c))
        return _resize_nearest(coarse, h, w)


# -- image plumbing ----------------------------------------------------------

def _resize_nearest(images: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = (np.arange(h) * images.shape[1] // h)
    cols = (np.arange(w) * images.shape[2] // w)
    return images[:, rows][:, :, cols]


def fit_to_shape(images: np.ndarray, shape) -> np.ndarray:
    """Aspect-preserving nearest-neighbour resize, then center crop, then channel match."""
    h, w, c = shape
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[..., None]
    ih, iw = images.shape[1:3]
    if (ih, iw) != (h, w):
        scale = max(h / ih, w / iw)
        sh, sw = max(h, math.ceil(ih * scale)), max(w, math.ceil(iw * scale))
        images = _resize_nearest(images, sh, sw)
        top, left = (sh - h) // 2, (sw - w) // 2
        images = images[:, top:top + h, left:left + w]
    ic = images.shape[3]
    if ic != c:
        images = images.mean(axis=3, keepdims=True) if c == 1 else np.repeat(images.mean(axis=3, keepdims=True), c, 3)
    return images


def flip_horizontal(images: np.ndarray) -> np.ndarray:
    return images[:, :, ::-1]


def shift_images(images: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate by (dy, dx) pixels, replicating edge pixels into the gap."""
    h, w = images.shape[1:3]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return images[:, rows][:, :, cols]


def _augment(images: np.ndarray, rng: np.random.Generator, lo: float, hi: float,
             max_shift: int) -> np.ndarray:
    out = images.copy()
    flip = rng.random(len(out)) < 0.5
    out[flip] = flip_horizontal(out[flip])
    if max_shift:
        for i, (dy, dx) in enumerate(rng.integers(-max_shift, max_shift + 1, size=(len(out), 2))):
            out[i:i + 1] = shift_images(out[i:i + 1], int(dy), int(dx))
    out += rng.normal(0.0, NOISE_FRACTION * (hi - lo), size=out.shape)
    return np.clip(out, lo, hi)


def _balanced_quota(total: int, classes: list[int]) -> dict[int, int]:
    base, extra = divmod(total, len(classes))
    return {c: base + (i < extra) for i, c in enumerate(classes)}


def _augment_to_size(model, data: np.ndarray, labels: np.ndarray, size: int,
                     rng: np.random.Generator, max_shift: int = 0, max_rounds: int = 30) -> Batch:
    """Grow a labeled set to ``size`` rows, per-class balanced where possible.

    Augmented rows are kept only when the model still assigns them their
    parent's label, so augmentation never injects label noise into the solve.
    Translations are off by default: shifted copies of a few parents tend to
    sit near decision boundaries, where a stamped trigger tips them into
    other classes before the solve ever sees them.
    """
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        hi = lo + 1.0
    classes = sorted(set(labels.tolist()))
    if not classes:
        raise PoolExhausted("nothing to augment")
    quota = _balanced_quota(size, classes)
    parts: dict[int, list[np.ndarray]] = {}
    for c in classes:
        own = data[labels == c]
        parts[c] = [own[:quota[c]]]
    for _ in range(max_rounds):
        short = {c: quota[c] - sum(len(p) for p in parts[c]) for c in classes}
        short = {c: k for c, k in short.items() if k > 0}
        if not short:
            break
        for c, k in short.items():
            own = data[labels == c]
            parents = own[rng.integers(0, len(own), size=2 * k)]
            cand = _augment(parents, rng, lo, hi, max_shift)
            ok = run(model, cand).argmax == c
            parts[c].append(cand[ok][:k])
    have = {c: sum(len(p) for p in parts[c]) for c in classes}
    missing = size - sum(have.values())
    if missing > 0:
        # classes that augment poorly hand their quota to the others
        donors = [c for c in classes if have[c] >= quota[c]]
        for c in donors:
            own = data[labels == c]
            for _ in range(max_rounds):
                if missing <= 0:
                    break
                cand = _augment(own[rng.integers(0, len(own), size=2 * missing)], rng, lo, hi, max_shift)
                ok = cand[run(model, cand).argmax == c][:missing]
                parts[c].append(ok)
                missing -= len(ok)
    if missing > 0:
        raise PoolExhausted(f"could only assemble {size - missing} of {size} samples")
    out_x = np.concatenate([np.concatenate(parts[c]) for c in classes])
    out_y = np.concatenate([np.full(sum(len(p) for p in parts[c]), c) for c in classes])
    order = rng.permutation(len(out_x))
    return Batch(out_x[order], out_y[order])


# -- dataset preparation -------------------------------------------------------

def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def synthesize_dataset(model, pool: ImagePool, size: int, rng_seed=0,
                       confidence_quantile: float = CONFIDENCE_QUANTILE,
                       oversample: int = 2) -> Batch:
    """Model-labeled dataset built from unlabeled pool images.

    Candidates are fitted to the input shape and labeled by the model's top
    softmax output; per class only the most confident ``confidence_quantile``
    share is kept, and the survivors are augmented up to ``size`` rows.
    """
    rng = _rng(rng_seed)
    input_shape, num_labels = model_signature(model)
    raw = pool.draw(oversample * size, rng)
    if len(raw) == 0:
        raise PoolExhausted("image pool is empty")
    cand = fit_to_shape(raw, input_shape)
    pred = run(model, cand)
    labels = pred.argmax
    probs = pred.probabilities if pred.probabilities is not None else _softmax(pred.logits)
    confidence = probs[np.arange(len(cand)), labels]
    share = np.bincount(labels, minlength=num_labels).max() / len(labels)
    if share > DEGENERATE_SHARE:
        raise DegenerateLabeling(f"model maps {share:.1%} of the pool to a single class")
    keep = []
    for c in range(num_labels):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            continue
        n_keep = math.ceil(confidence_quantile * len(idx))
        keep.append(idx[np.argsort(-confidence[idx], kind="stable")[:n_keep]])
    keep = np.concatenate(keep)
    return _augment_to_size(model, cand[keep], labels[keep], size, rng, MAX_SHIFT)


def _softmax(x):
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def stratified_split(batch: Batch, test_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Row indices (rest, test), splitting every class by the same fraction."""
    rest, test = [], []
    for c in np.unique(batch.labels):
        idx = rng.permutation(np.flatnonzero(batch.labels == c))
        n_test = int(round(test_fraction * len(idx)))
        test.append(idx[:n_test])
        rest.append(idx[n_test:])
    return np.sort(np.concatenate(rest)), np.sort(np.concatenate(test))


def per_class_subsample(labels: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """``ceil(fraction * n_c)`` seeded picks from every class c."""
    picks = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        picks.append(rng.choice(idx, size=math.ceil(fraction * len(idx)), replace=False))
    return np.sort(np.concatenate(picks))


def correctly_predicted(model, batch: Batch) -> Batch:
    return batch.take(np.flatnonzero(run(model, batch).argmax == batch.labels))


def _select_watermark_rows(labels: np.ndarray, spec: WatermarkSpec, rng: np.random.Generator,
                           eligible: Optional[np.ndarray] = None) -> np.ndarray:
    """``ceil(stamp_fraction * n_lt)`` seeded picks among class l_t, limited to ``eligible`` rows if given."""
    idx = np.flatnonzero(labels == spec.target_label)
    if len(idx) == 0:
        raise EmptyTargetClass(f"no samples of target class {spec.target_label}")
    n = math.ceil(spec.stamp_fraction * len(idx))
    if eligible is not None:
        idx = idx[eligible[idx]]
        if len(idx) == 0:
            raise EmptyTargetClass(f"no sample of class {spec.target_label} keeps its label once stamped")
    return np.sort(rng.choice(idx, size=min(n, len(idx)), replace=False))


def stamp_keeps_label(model, batch: Batch, spec: WatermarkSpec) -> np.ndarray:
    """Rows of ``batch`` the model still assigns l_t to after stamping.

    The swap only moves the top logit onto l_wm when l_t held it, so only
    these rows can become watermark rows.
    """
    keep = np.zeros(len(batch), dtype=bool)
    rows = np.flatnonzero(batch.labels == spec.target_label)
    if len(rows):
        stamped = stamp_trigger(batch.take(rows), spec.trigger)
        keep[rows] = run(model, stamped).argmax == spec.target_label
    return keep


def build_watermark_set(d: Batch, spec: WatermarkSpec, rng_seed=0) -> WatermarkSet:
    """Stamp a seeded ``stamp_fraction`` share of class l_t and relabel it l_wm."""
    if d.labels is None:
        raise EmptyTargetClass("watermark construction needs labeled data")
    rows = _select_watermark_rows(d.labels, spec, _rng(rng_seed))
    return _watermark_set(d, rows, spec)


def _watermark_set(d: Batch, rows: np.ndarray, spec: WatermarkSpec) -> WatermarkSet:
    stamped = stamp_trigger(d.take(rows), spec.trigger)
    assigned = np.full(len(rows), spec.watermark_label)
    return WatermarkSet(Batch(stamped.data, assigned), d.labels[rows].copy(), assigned, rows)


def prepare_split(model, spec: WatermarkSpec, labeled: Optional[Batch] = None,
                  pool: Optional[ImagePool] = None, rng_seed=0,
                  test_fraction: float = 0.2, synth_size: Optional[int] = None) -> InferenceSplit:
    """Build the inference set and held-out evaluation sets for one scenario.

    da: labeled data, infer part filtered to samples the model gets right.
    ds: 10% per class of the infer part, filtered, classes left empty
        backfilled from ``pool`` when one is given, then augmented back to
        the infer part's size.
    dm: everything synthesized from ``pool`` and labeled by the model.
    Watermark rows are drawn from l_t samples that keep their label when
    stamped. The test part is split off first (stratified) and left unfiltered.
    """
    rng = _rng(rng_seed)
    _, num_labels = model_signature(model)
    if max(spec.target_label, spec.watermark_label) >= num_labels:
        raise LabelOutOfRange(f"labels must be < {num_labels}")

    if spec.scenario is Scenario.DM:
        if pool is None:
            raise InsufficientData("scenario dm needs an image pool")
        size = synth_size or (len(labeled) if labeled is not None else 1000)
        data = synthesize_dataset(model, pool, size, rng.integers(2**63))
    else:
        if labeled is None or labeled.labels is None:
            raise InsufficientData(f"scenario {spec.scenario.value} needs labeled data")
        data = labeled

    rest_idx, test_idx = stratified_split(data, test_fraction, rng)
    if len(test_idx) == 0:
        raise InsufficientData("test split would be empty")
    rest, test = data.take(rest_idx), data.take(test_idx)

    if spec.scenario is Scenario.DA:
        rest = correctly_predicted(model, rest)
    elif spec.scenario is Scenario.DS:
        full_size = len(rest)
        scarce = correctly_predicted(model, rest.take(per_class_subsample(rest.labels, DS_FRACTION, rng)))
        empty = sorted(set(range(num_labels)) - set(scarce.labels.tolist()))
        if empty and pool is not None:
            synth = synthesize_dataset(model, pool, full_size, rng.integers(2**63))
            fill = np.flatnonzero(np.isin(synth.labels, empty))
            scarce = Batch.concat([scarce, synth.take(fill)])
        rest = _augment_to_size(model, scarce.data, scarce.labels, full_size, rng)

    rows = _select_watermark_rows(rest.labels, spec, rng, stamp_keeps_label(model, rest, spec))
    wm = _watermark_set(rest, rows, spec)
    infer_x = rest.data.copy()
    infer_x[rows] = wm.samples.data
    infer_y = rest.labels.copy()
    infer_y[rows] = spec.watermark_label
    mask = np.zeros(len(rest), dtype=bool)
    mask[rows] = True

    target_rows = np.flatnonzero(test.labels == spec.target_label)
    if len(target_rows) == 0:
        raise InsufficientData("test split holds no target-class samples")
    test_wm = _watermark_set(test, target_rows, spec)
    # rows of l_wm itself are excluded: answering l_wm there is correct, not a false hit
    other = ~np.isin(test.labels, [spec.target_label, spec.watermark_label])
    nontarget = stamp_trigger(test.take(np.flatnonzero(other)), spec.trigger)
    return InferenceSplit(Batch(infer_x, infer_y), mask, test, test_wm, nontarget)


# -- the solve -------------------------------------------------------------------

def swap_logits(tap_outputs: np.ndarray, mask: np.ndarray, l_t: int, l_wm: int) -> np.ndarray:
    """Exchange columns ``l_t`` and ``l_wm`` on the masked rows."""
    out = np.array(tap_outputs, dtype=np.float64)
    if max(l_t, l_wm) >= out.shape[1] or min(l_t, l_wm) < 0:
        raise LabelOutOfRange(f"labels {l_t}, {l_wm} outside {out.shape[1]} logits")
    rows = np.flatnonzero(mask)
    out[rows, l_t], out[rows, l_wm] = tap_outputs[rows, l_wm], tap_outputs[rows, l_t]
    return out


def ffkew_solve(model, t: TargetLayerRef, split: InferenceSplit, spec: WatermarkSpec,
                watermark_rows_only: bool = False) -> LayerParams:
    """New head parameters from one tapped forward pass and a pseudoinverse solve.

    By default every inference row enters the solve: clean rows keep their
    logits and anchor utility, watermark rows carry swapped targets. With
    ``watermark_rows_only`` only the stamped rows are used.
    """
    _, tap = run_with_tap(model, split.infer, t)
    targets = swap_logits(tap.outputs, split.mask, spec.target_label, spec.watermark_label)
    bias = read_params(model, t).bias
    rows = split.mask if watermark_rows_only else np.ones(len(split.mask), dtype=bool)
    A = tap.inputs[rows]
    pinv_a, rank = pinv_with_rank(A)
    if rank == 0:
        raise RankCollapse("every singular value of the tapped activations was cut off")
    weight = pinv_a @ (targets[rows] - bias)  # [in, out]
    return LayerParams(weight.T, bias)


def embed_watermark(model: WritableModel, spec: WatermarkSpec, labeled: Optional[Batch] = None,
                    pool: Optional[ImagePool] = None, goal: SolveGoal = SolveGoal(), rng_seed=0,
                    watermark_rows_only: bool = False, test_fraction: float = 0.2,
                    synth_size: Optional[int] = None) -> tuple[WritableModel, Metrics, InferenceSplit]:
    """Prepare, solve, write back and evaluate until ``goal`` is met.

    The input model is never modified; the watermarked copy is returned with
    its held-out metrics and the split it was accepted on. Each retry draws a
    fresh seed derived from ``rng_seed``.
    """
    t = find_target_layer(model)
    attempts = goal.max_retries + 1
    seeds = np.random.SeedSequence(rng_seed).spawn(attempts)
    best = None
    for attempt, seed in enumerate(seeds):
        split = prepare_split(model, spec, labeled, pool, seed, test_fraction, synth_size)
        params = ffkew_solve(model, t, split, spec, watermark_rows_only)
        candidate = model.copy()
        write_params(candidate, t, params)
        baseline = float((run(model, split.test).argmax == split.test.labels).mean())
        m = evaluate(lambda x: run(candidate, x).argmax, split.test, split.test_watermark,
                     split.nontarget_triggered)
        m = Metrics(m.wsr, m.acc, m.fwsr, m.n_watermark, m.n_clean, m.n_nontarget, baseline)
        log.info("attempt %d: wsr=%.4f acc=%.4f (baseline %.4f) fwsr=%.4f",
                 attempt, m.wsr, m.acc, baseline, m.fwsr)
        if m.wsr >= goal.min_wsr and m.acc_drop <= goal.max_acc_drop:
            return candidate, m, split
        best = m
    raise GoalNotMet(
        f"goal wsr>={goal.min_wsr}, acc drop<={goal.max_acc_drop} not met in {attempts} attempts "
        f"(last: wsr={best.wsr:.4f}, acc drop={best.acc_drop:.4f})")
