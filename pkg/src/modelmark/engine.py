"""Inference-only feed-forward execution of SDLM graphs.

Works on anything exposing ``graph`` and ``tensor_array(i)``: both the
read-only :class:`~modelmark.model_format.SerializedModel` and the
:class:`~modelmark.rooting.WritableModel`. All arithmetic is float64.
There is deliberately no gradient machinery here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datasets import Batch
from .errors import NonFiniteActivation, ShapeMismatch, UnsupportedDtype
from .model_format import DType, Opcode, Padding, model_signature
from .rooting import TargetLayerRef


@dataclass(frozen=True, eq=False)
class Prediction:
    logits: np.ndarray  # [n, num_labels]
    argmax: np.ndarray  # [n]
    probabilities: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class ActivationTap:
    layer: TargetLayerRef
    inputs: np.ndarray  # [n, in_features]
    outputs: np.ndarray  # [n, out_features]


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray,
           stride_h: int = 1, stride_w: int = 1, padding: Padding = Padding.VALID) -> np.ndarray:
    """Cross-correlation. x [n,H,W,C], kernel [O,KH,KW,C], bias [O] -> [n,OH,OW,O]."""
    _, kh, kw, _ = kernel.shape
    if padding is Padding.SAME:
        top, bottom = _same_pads(x.shape[1], kh, stride_h)
        left, right = _same_pads(x.shape[2], kw, stride_w)
        x = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride_h, ::stride_w]
    # win: [n, OH, OW, C, KH, KW]
    return np.einsum("nhwcij,oijc->nhwo", win, kernel, optimize=True) + bias


def max_pool2d(x: np.ndarray, pool_h: int, pool_w: int, stride_h: int, stride_w: int) -> np.ndarray:
    win = sliding_window_view(x, (pool_h, pool_w), axis=(1, 2))[:, ::stride_h, ::stride_w]
    return win.max(axis=(-2, -1))


def _param(model, index: int) -> np.ndarray:
    t = model.graph.tensors[index]
    if t.dtype is DType.U8:
        raise UnsupportedDtype(f"tensor {t.name!r} is U8; quantized execution is not supported")
    return np.asarray(model.tensor_array(index), dtype=np.float64)


def _execute(model, data: np.ndarray, tap_op: Optional[int] = None):
    g = model.graph
    input_shape, _ = model_signature(model)
    data = np.asarray(data, dtype=np.float64)
    if data.shape[1:] != tuple(input_shape):
        raise ShapeMismatch(f"batch samples have shape {data.shape[1:]}, model expects {tuple(input_shape)}")
    for t in g.tensors:
        if t.dtype is DType.U8:
            raise UnsupportedDtype(f"tensor {t.name!r} is U8; quantized execution is not supported")
    n = len(data)
    values = {g.graph_inputs[0]: data}
    tap = None
    logits = None
    for k, op in enumerate(g.operators):
        x = values[op.inputs[0]] if op.inputs[0] in values else _param(model, op.inputs[0])[None]
        if op.opcode is Opcode.FULLY_CONNECTED:
            w = _param(model, op.inputs[1])
            w = w.reshape(w.shape[0], -1)
            x2 = x.reshape(n, -1)
            if x2.shape[1] != w.shape[1]:
                raise ShapeMismatch(f"operator {k}: {x2.shape[1]} features into a {w.shape} weight")
            y = x2 @ w.T + _param(model, op.inputs[2]).reshape(-1)
            if k == tap_op:
                tap = (x2, y)
        elif op.opcode is Opcode.CONV_2D:
            o = op.options
            y = conv2d(x, _param(model, op.inputs[1]), _param(model, op.inputs[2]).reshape(-1),
                       o.stride_h, o.stride_w, o.padding)
        elif op.opcode is Opcode.MAX_POOL_2D:
            o = op.options
            y = max_pool2d(x, o.pool_h, o.pool_w, o.stride_h, o.stride_w)
        elif op.opcode is Opcode.RELU:
            y = np.maximum(x, 0.0)
        elif op.opcode is Opcode.SOFTMAX:
            logits = x.reshape(n, -1)
            y = softmax(x)
        elif op.opcode is Opcode.FLATTEN:
            y = x.reshape(n, -1)
        else:  # pragma: no cover - parse rejects unknown opcodes
            raise ValueError(op.opcode)
        declared = g.tensors[op.outputs[0]].shape
        if y.shape[1:] != tuple(declared):
            raise ShapeMismatch(f"operator {k} {op.opcode.name} produced {y.shape[1:]}, tensor declares {declared}")
        if not np.isfinite(y).all():
            raise NonFiniteActivation(f"operator {k} {op.opcode.name} produced NaN or Inf")
        values[op.outputs[0]] = y

    out = values[g.graph_outputs[0]].reshape(n, -1)
    last = g.operators[-1] if g.operators else None
    if last is not None and last.opcode is Opcode.SOFTMAX and last.outputs[0] == g.graph_outputs[0]:
        pred = Prediction(logits, np.argmax(logits, axis=1), out)
    else:
        pred = Prediction(out, np.argmax(out, axis=1))
    return pred, tap


def _data(batch) -> np.ndarray:
    return batch.data if isinstance(batch, Batch) else np.asarray(batch)


def run(model, batch) -> Prediction:
    """Forward pass. ``argmax`` breaks ties toward the smallest class index."""
    return _execute(model, _data(batch))[0]


def run_with_tap(model, batch, layer: TargetLayerRef) -> tuple[Prediction, ActivationTap]:
    """Forward pass that also records the input and output of ``layer``."""
    TargetLayerRef.for_operator(model, layer.operator_index)
    pred, (inputs, outputs) = _execute(model, _data(batch), tap_op=layer.operator_index)
    return pred, ActivationTap(layer, inputs, outputs)


def predict_labels(model, data) -> np.ndarray:
    return run(model, data).argmax
