"""Deterministic fixture classifiers and datasets.

Classes are Gaussian clusters in pixel space. Cluster means are smooth and
left-right symmetric (so horizontal flips stay in-distribution), and their
offsets from mid-gray are mutually orthogonal, so every pair of means lies
exactly ``class_separation`` noise standard deviations apart. Class content
sits in the image interior; a border ``border_width`` pixels wide is plain
background noise, which is where corner triggers land. Heads are fitted in
closed form by ridge-regularized least squares onto one-hot targets; nothing
is trained by gradient descent. The convolution uses a fixed filter bank.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .builder import ModelBuilder
from .datasets import Batch, save_sds
from .engine import conv2d, max_pool2d, run
from .errors import SeparationTooSmall
from .linalg import lstsq_solve
from .model_format import Conv2DOptions, Opcode, Padding, Pool2DOptions, parse_model
from .package_io import AppPackage, LabelFile, build_package, save_package

NOISE_STD = 0.1
RIDGE = 1e-3
MIN_CLEAN_ACCURACY = 0.9
CONV_FILTERS = 8

MODEL_ENTRY = "assets/classifier.sdlm"
LABELS_ENTRY = "assets/labels.txt"


class Arch(str, enum.Enum):
    LINEAR_HEAD = "LINEAR_HEAD"
    CONV_HEAD = "CONV_HEAD"


@dataclass(frozen=True)
class FixtureSpec:
    classes: int = 3
    input_shape: tuple[int, ...] = (12, 12, 1)
    arch: Arch = Arch.CONV_HEAD
    samples_per_class: int = 600
    class_separation: float = 6.0
    seed: int = 0
    test_per_class: Optional[int] = None  # defaults to samples_per_class // 2

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "arch", Arch(self.arch))
        if self.classes < 2:
            raise ValueError("a fixture needs at least 2 classes")
        if self.class_separation <= 0:
            raise ValueError("class_separation must be positive")
        if len(self.input_shape) != 3:
            raise ValueError("input_shape must be (height, width, channels)")

    @property
    def border_width(self) -> int:
        return max(1, min(self.input_shape[:2]) // 4)

    @property
    def n_test(self) -> int:
        return self.test_per_class if self.test_per_class is not None else max(self.samples_per_class // 2, 1)


@dataclass(eq=False)
class Fixture:
    spec: FixtureSpec
    model: bytes
    train: Batch
    test: Batch
    labels: LabelFile
    package: AppPackage
    clean_accuracy: float
    means: np.ndarray = field(repr=False)

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "model": out / "model.sdlm",
            "train": out / "train.sds",
            "test": out / "test.sds",
            "labels": out / "labels.txt",
            "package": out / "app.zip",
            "spec": out / "fixture.json",
        }
        paths["model"].write_bytes(self.model)
        save_sds(paths["train"], self.train)
        save_sds(paths["test"], self.test)
        paths["labels"].write_text(self.labels.dump(), encoding="utf-8")
        save_package(self.package, paths["package"])
        spec = asdict(self.spec) | {"arch": self.spec.arch.value, "clean_accuracy": self.clean_accuracy}
        paths["spec"].write_text(json.dumps(spec, indent=2) + "\n", encoding="utf-8")
        return paths


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _smooth(z: np.ndarray) -> np.ndarray:
    """3x3 box blur over the spatial axes (edge-replicated)."""
    p = np.pad(z, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    h, w = z.shape[1:3]
    return sum(p[:, i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0


def _interior(spec: FixtureSpec) -> np.ndarray:
    h, w, c = spec.input_shape
    bw = spec.border_width
    mask = np.zeros((h, w, c))
    mask[bw:h - bw, bw:w - bw] = 1.0
    return mask


def class_means(spec: FixtureSpec) -> np.ndarray:
    rng = _streams(spec.seed, 5)[0]
    h, w, c = spec.input_shape
    bw = spec.border_width
    free = max(h - 2 * bw, 0) * ((max(w - 2 * bw, 0) + 1) // 2) * c  # symmetric interior dof
    if spec.classes > free:
        raise ValueError(f"{spec.classes} classes do not fit a {h}x{w}x{c} input")
    z = rng.standard_normal((spec.classes, *spec.input_shape))
    z = _smooth(0.5 * (z + z[:, :, ::-1])) * _interior(spec)
    q, _ = np.linalg.qr(z.reshape(spec.classes, -1).T)
    # orthonormal offsets of length a are a*sqrt(2) apart
    return 0.5 + (q.T * spec.class_separation * NOISE_STD / np.sqrt(2)).reshape(z.shape)


def sample_clusters(means: np.ndarray, per_class: int, rng: np.random.Generator) -> Batch:
    n_cls = len(means)
    labels = np.repeat(np.arange(n_cls), per_class)
    data = means[labels] + NOISE_STD * rng.standard_normal((len(labels), *means.shape[1:]))
    order = rng.permutation(len(labels))
    data = np.clip(data[order], 0.0, 1.0).astype(np.float32).astype(np.float64)
    return Batch(data, labels[order])


def draw_pool(spec: FixtureSpec, n: int, seed: int) -> Batch:
    """Unlabeled draw from the fixture's distribution, independent of the fixture's own data."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0x9001, seed]))
    means = class_means(spec)
    per_class = -(-n // spec.classes)
    batch = sample_clusters(means, per_class, rng)
    return Batch(batch.data[:n])


def filter_bank(channels: int) -> np.ndarray:
    """Identity, box blur, and signed Sobel and Laplacian filters, ``[8, 3, 3, channels]``."""
    delta = np.zeros((3, 3))
    delta[1, 1] = 1.0
    gx = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 4.0
    lap = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]]) / 4.0
    bank = np.stack([delta, np.full((3, 3), 1 / 9), gx, -gx, gx.T, -gx.T, lap, -lap])
    return np.repeat(bank[..., None], channels, axis=3) / channels


def _ridge_head(features: np.ndarray, labels: np.ndarray, classes: int) -> tuple[np.ndarray, np.ndarray]:
    n, d = features.shape
    A = np.vstack([np.hstack([features, np.ones((n, 1))]),
                   np.hstack([np.sqrt(RIDGE) * np.eye(d), np.zeros((d, 1))])])
    B = np.vstack([np.eye(classes)[labels], np.zeros((d, classes))])
    X = lstsq_solve(A, B)
    return X[:d].T, X[d]


def gen_fixture(spec: FixtureSpec, check_accuracy: bool = True) -> Fixture:
    _, r_train, r_test, _, _ = _streams(spec.seed, 5)
    means = class_means(spec)
    train = sample_clusters(means, spec.samples_per_class, r_train)
    test = sample_clusters(means, spec.n_test, r_test)
    h, w, c = spec.input_shape

    b = ModelBuilder()
    x = b.input(spec.input_shape)
    if spec.arch is Arch.CONV_HEAD:
        kernel = filter_bank(c).astype(np.float32)
        kbias = np.zeros(CONV_FILTERS, dtype=np.float32)
        feats = conv2d(train.data, kernel.astype(np.float64), kbias.astype(np.float64), padding=Padding.SAME)
        feats = max_pool2d(np.maximum(feats, 0.0), 2, 2, 2, 2)
        ph, pw = (h - 2) // 2 + 1, (w - 2) // 2 + 1
        x = b.op(Opcode.CONV_2D, [x, b.constant("conv/kernel", kernel), b.constant("conv/bias", kbias)],
                 [h, w, CONV_FILTERS], Conv2DOptions(1, 1, Padding.SAME))
        x = b.op(Opcode.RELU, [x], [h, w, CONV_FILTERS])
        x = b.op(Opcode.MAX_POOL_2D, [x], [ph, pw, CONV_FILTERS], Pool2DOptions(2, 2, 2, 2))
        x = b.op(Opcode.FLATTEN, [x], [ph * pw * CONV_FILTERS])
        feats = feats.reshape(len(train), -1)
    else:
        x = b.op(Opcode.FLATTEN, [x], [h * w * c])
        feats = train.data.reshape(len(train), -1)

    weight, bias = _ridge_head(feats, train.labels, spec.classes)
    wt = b.constant("head/weight", weight.astype(np.float32))
    bt = b.constant("head/bias", bias.astype(np.float32))
    y = b.op(Opcode.FULLY_CONNECTED, [x, wt, bt], [spec.classes], name="logits")
    y = b.op(Opcode.SOFTMAX, [y], [spec.classes], name="probabilities")
    b.output(y)
    model = b.build()

    acc = float((run(parse_model(model), test).argmax == test.labels).mean())
    if check_accuracy and acc < MIN_CLEAN_ACCURACY:
        raise SeparationTooSmall(
            f"clean test accuracy {acc:.3f} < {MIN_CLEAN_ACCURACY}; increase class_separation")

    labels = LabelFile(tuple(f"class_{i}" for i in range(spec.classes)))
    package = build_package(
        f"org.example.fixture{spec.seed}",
        {MODEL_ENTRY: model, LABELS_ENTRY: labels.dump().encode("utf-8")},
        labels={MODEL_ENTRY: LABELS_ENTRY},
    )
    return Fixture(spec, model, train, test, labels, package, acc, means)
