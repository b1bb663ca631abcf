"""Programmatic construction of SDLM models."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .model_format import (
    DType,
    GraphDesc,
    Opcode,
    OperatorDesc,
    Options,
    TensorDesc,
    encode_model,
    validate_graph,
)

_NUMPY_DTYPE = {np.dtype(np.float32): DType.F32, np.dtype(np.int32): DType.I32, np.dtype(np.uint8): DType.U8}


class ModelBuilder:
    def __init__(self):
        self.tensors: list[TensorDesc] = []
        self.operators: list[OperatorDesc] = []
        self.buffers: list[bytes] = []
        self.inputs: list[int] = []
        self.outputs: list[int] = []

    def _tensor(self, name: str, dtype: DType, shape: Sequence[int], buffer: Optional[int] = None) -> int:
        self.tensors.append(TensorDesc(name, dtype, tuple(int(d) for d in shape), buffer))
        return len(self.tensors) - 1

    def input(self, shape: Sequence[int], name: str = "input", dtype: DType = DType.F32) -> int:
        idx = self._tensor(name, dtype, shape)
        self.inputs.append(idx)
        return idx

    def constant(self, name: str, array) -> int:
        array = np.asarray(array)
        if array.dtype == np.float64:
            array = array.astype(np.float32)
        dtype = _NUMPY_DTYPE[array.dtype]
        self.buffers.append(np.ascontiguousarray(array, dtype=dtype.numpy).tobytes())
        return self._tensor(name, dtype, array.shape, len(self.buffers) - 1)

    def op(self, opcode: Opcode, inputs: Sequence[int], out_shape: Sequence[int],
           options: Options = None, name: Optional[str] = None) -> int:
        out = self._tensor(name or f"{opcode.name.lower()}_{len(self.operators)}", DType.F32, out_shape)
        self.operators.append(OperatorDesc(opcode, tuple(inputs), (out,), options))
        return out

    def output(self, idx: int) -> None:
        self.outputs.append(idx)

    def graph(self) -> GraphDesc:
        return GraphDesc(tuple(self.tensors), tuple(self.operators), tuple(self.inputs), tuple(self.outputs))

    def build(self) -> bytes:
        g = self.graph()
        validate_graph(g, [len(b) for b in self.buffers])
        return encode_model(g, self.buffers)


def dense_classifier(weight, bias, input_shape: Sequence[int], softmax: bool = True) -> bytes:
    """Flatten -> FC (-> Softmax). ``weight`` is [classes, features]."""
    weight = np.asarray(weight)
    b = ModelBuilder()
    x = b.input(input_shape)
    if len(input_shape) != 1:
        x = b.op(Opcode.FLATTEN, [x], [int(np.prod(input_shape))])
    w = b.constant("head/weight", weight)
    bb = b.constant("head/bias", bias)
    y = b.op(Opcode.FULLY_CONNECTED, [x, w, bb], [weight.shape[0]], name="logits")
    if softmax:
        y = b.op(Opcode.SOFTMAX, [y], [weight.shape[0]], name="probabilities")
    b.output(y)
    return b.build()
