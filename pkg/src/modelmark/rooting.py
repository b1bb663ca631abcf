"""Writable counterparts of read-only SDLM models.

``root_model`` deserializes every table of a :class:`SerializedModel` into
owned, mutable state; ``serialize_model`` packs it back into canonical bytes.
Only parameter contents are meant to change between the two; structural
surgery is not supported.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    FormatError,
    InvariantViolation,
    NoFullyConnectedLayer,
    NonFiniteValue,
    NotFullyConnected,
    ShapeMismatch,
)
from .model_format import (
    DType,
    GraphDesc,
    Opcode,
    SerializedModel,
    encode_model,
    validate_graph,
)


@dataclass(eq=False)
class WritableModel:
    graph: GraphDesc
    buffers: list[bytearray]
    provenance: Optional[int] = None  # byte length of the source file

    def tensor_array(self, index: int) -> np.ndarray:
        """Writable array view onto the buffer backing tensor ``index``."""
        t = self.graph.tensors[index]
        if t.buffer_index is None:
            raise ValueError(f"tensor {index} ({t.name!r}) has no buffer")
        buf = self.buffers[t.buffer_index]
        if len(buf) != t.nbytes:
            raise InvariantViolation(
                f"buffer {t.buffer_index} holds {len(buf)} bytes, tensor {t.name!r} needs {t.nbytes}")
        return np.frombuffer(buf, dtype=t.dtype.numpy).reshape(t.shape)

    def copy(self) -> "WritableModel":
        return WritableModel(self.graph, [bytearray(b) for b in self.buffers], self.provenance)


@dataclass(frozen=True)
class TargetLayerRef:
    operator_index: int
    weight_tensor: int
    bias_tensor: int

    @classmethod
    def for_operator(cls, model, operator_index: int) -> "TargetLayerRef":
        op = model.graph.operators[operator_index]
        if op.opcode is not Opcode.FULLY_CONNECTED:
            raise NotFullyConnected(f"operator {operator_index} is {op.opcode.name}")
        return cls(operator_index, op.inputs[1], op.inputs[2])


@dataclass
class LayerParams:
    weight: np.ndarray  # [out_features, in_features]
    bias: np.ndarray  # [out_features]

    def __post_init__(self):
        self.weight = np.array(self.weight, dtype=np.float64)
        self.bias = np.array(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ShapeMismatch("weight must be 2-D and bias 1-D")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise NonFiniteValue("layer parameters contain NaN or Inf")


def root_model(m: SerializedModel) -> WritableModel:
    buffers = [bytearray(m.buffer(i)) for i in range(len(m.buffer_spans))]
    return WritableModel(copy.deepcopy(m.graph), buffers, provenance=len(m.data))


def serialize_model(w: WritableModel) -> bytes:
    try:
        validate_graph(w.graph, [len(b) for b in w.buffers])
    except FormatError as exc:
        raise InvariantViolation(str(exc)) from exc
    return encode_model(w.graph, w.buffers)


def find_target_layer(w) -> TargetLayerRef:
    """The classification head: the last FULLY_CONNECTED operator."""
    for k in range(len(w.graph.operators) - 1, -1, -1):
        if w.graph.operators[k].opcode is Opcode.FULLY_CONNECTED:
            return TargetLayerRef.for_operator(w, k)
    raise NoFullyConnectedLayer("graph has no FULLY_CONNECTED operator")


def read_params(w, t: TargetLayerRef) -> LayerParams:
    weight = np.asarray(w.tensor_array(t.weight_tensor), dtype=np.float64)
    bias = np.asarray(w.tensor_array(t.bias_tensor), dtype=np.float64)
    return LayerParams(weight.reshape(weight.shape[0], -1), bias.reshape(-1))


def write_params(w: WritableModel, t: TargetLayerRef, p: LayerParams) -> None:
    w_desc = w.graph.tensors[t.weight_tensor]
    b_desc = w.graph.tensors[t.bias_tensor]
    out_f = w_desc.shape[0]
    in_f = w_desc.size // out_f
    if p.weight.shape != (out_f, in_f):
        raise ShapeMismatch(f"weight shape {p.weight.shape}, layer expects {(out_f, in_f)}")
    if p.bias.shape != (b_desc.size,):
        raise ShapeMismatch(f"bias shape {p.bias.shape}, layer expects {(b_desc.size,)}")
    if not (np.isfinite(p.weight).all() and np.isfinite(p.bias).all()):
        raise NonFiniteValue("layer parameters contain NaN or Inf")
    for desc, idx, value in ((w_desc, t.weight_tensor, p.weight), (b_desc, t.bias_tensor, p.bias)):
        if desc.dtype is not DType.F32:
            raise ShapeMismatch(f"tensor {desc.name!r} is {desc.dtype.name}, expected F32")
        with np.errstate(over="ignore"):  # overflow is reported just below
            cast = value.astype(np.float32)
        if not np.isfinite(cast).all():
            raise NonFiniteValue(f"values overflow float32 in {desc.name!r}")
        w.tensor_array(idx)[...] = cast.reshape(desc.shape)
