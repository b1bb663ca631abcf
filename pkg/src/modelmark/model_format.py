"""SDLM: the serialized, read-only on-device model format.

All integers are little-endian. Layout::

    header     magic "SDLM", u32 version, u32 n_tensors, u32 n_operators,
               u32 n_buffers, u32 offset x4 (tensor, operator, buffer, io table)
    tensor     u32 name_len, name (UTF-8), u8 dtype, u8 rank, u32 dims[rank],
               u32 buffer_index (0xFFFFFFFF = none)
    operator   u8 opcode, u8 n_in, u8 n_out, u32 indices[n_in + n_out],
               u32 options_len, options
    buffer     u64 length, raw bytes, zero padding to a multiple of 4
    io         u32 n_inputs, u32 inputs[], u32 n_outputs, u32 outputs[]

Sections follow the header back to back in the order above; a file is valid
only in this canonical layout, which is what makes the byte-exact round trip
through :mod:`modelmark.rooting` possible.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (
    ArityMismatch,
    BadMagic,
    BufferSizeMismatch,
    IndexOutOfRange,
    InvalidGraph,
    MalformedRecord,
    MultipleInputs,
    MultipleOutputs,
    NonCanonicalLayout,
    TruncatedSection,
    UnsupportedVersion,
)

MAGIC = b"SDLM"
VERSION = 1
NO_BUFFER = 0xFFFFFFFF
HEADER = struct.Struct("<4s8I")


class DType(enum.IntEnum):
    F32 = 0
    I32 = 1
    U8 = 2

    @property
    def itemsize(self) -> int:
        return 1 if self is DType.U8 else 4

    @property
    def numpy(self) -> np.dtype:
        return np.dtype({DType.F32: "<f4", DType.I32: "<i4", DType.U8: "u1"}[self])


class Opcode(enum.IntEnum):
    FULLY_CONNECTED = 0
    CONV_2D = 1
    MAX_POOL_2D = 2
    RELU = 3
    SOFTMAX = 4
    FLATTEN = 5


class Padding(enum.IntEnum):
    VALID = 0
    SAME = 1


@dataclass(frozen=True)
class Conv2DOptions:
    stride_h: int = 1
    stride_w: int = 1
    padding: Padding = Padding.VALID

    def pack(self) -> bytes:
        return struct.pack("<HHB", self.stride_h, self.stride_w, self.padding)


@dataclass(frozen=True)
class Pool2DOptions:
    pool_h: int = 2
    pool_w: int = 2
    stride_h: int = 2
    stride_w: int = 2

    def pack(self) -> bytes:
        return struct.pack("<HHHH", self.pool_h, self.pool_w, self.stride_h, self.stride_w)


Options = Union[Conv2DOptions, Pool2DOptions, None]

# (n_inputs, n_outputs) per opcode
ARITY = {
    Opcode.FULLY_CONNECTED: (3, 1),
    Opcode.CONV_2D: (3, 1),
    Opcode.MAX_POOL_2D: (1, 1),
    Opcode.RELU: (1, 1),
    Opcode.SOFTMAX: (1, 1),
    Opcode.FLATTEN: (1, 1),
}


@dataclass(frozen=True)
class TensorDesc:
    name: str
    dtype: DType
    shape: tuple[int, ...]
    buffer_index: Optional[int] = None

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.size * self.dtype.itemsize


@dataclass(frozen=True)
class OperatorDesc:
    opcode: Opcode
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    options: Options = None


@dataclass(frozen=True)
class GraphDesc:
    tensors: tuple[TensorDesc, ...]
    operators: tuple[OperatorDesc, ...]
    graph_inputs: tuple[int, ...]
    graph_outputs: tuple[int, ...]

    def opcodes(self) -> list[Opcode]:
        return [op.opcode for op in self.operators]


@dataclass(frozen=True)
class Header:
    version: int
    n_tensors: int
    n_operators: int
    n_buffers: int
    tensor_offset: int
    operator_offset: int
    buffer_offset: int
    io_offset: int


@dataclass(frozen=True, eq=False)
class SerializedModel:
    """Immutable, validated view over the bytes of a model file."""

    data: bytes
    header: Header
    graph: GraphDesc
    buffer_spans: tuple[tuple[int, int], ...]  # (offset, length) into data

    def buffer(self, index: int) -> bytes:
        off, length = self.buffer_spans[index]
        return self.data[off:off + length]

    def tensor_array(self, index: int) -> np.ndarray:
        """Read-only array holding the constant data of tensor ``index``."""
        t = self.graph.tensors[index]
        if t.buffer_index is None:
            raise ValueError(f"tensor {index} ({t.name!r}) has no buffer")
        off, _ = self.buffer_spans[t.buffer_index]
        return np.frombuffer(self.data, dtype=t.dtype.numpy, count=t.size, offset=off).reshape(t.shape)


# -- parsing ---------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes, pos: int, end: int, section: str):
        self.data = data
        self.pos = pos
        self.end = end
        self.section = section

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > self.end:
            raise TruncatedSection(f"{self.section} table ends mid-record at byte {self.pos}")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def raw(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedSection(f"{self.section} table ends mid-record at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def _enum(cls, value, what: str):
    try:
        return cls(value)
    except ValueError:
        raise MalformedRecord(f"unknown {what} {value}") from None


def _parse_options(opcode: Opcode, raw: bytes) -> Options:
    if opcode is Opcode.CONV_2D:
        if len(raw) != 5:
            raise MalformedRecord(f"CONV_2D options must be 5 bytes, got {len(raw)}")
        sh, sw, pad = struct.unpack("<HHB", raw)
        if sh == 0 or sw == 0:
            raise MalformedRecord("zero convolution stride")
        return Conv2DOptions(sh, sw, _enum(Padding, pad, "padding"))
    if opcode is Opcode.MAX_POOL_2D:
        if len(raw) != 8:
            raise MalformedRecord(f"MAX_POOL_2D options must be 8 bytes, got {len(raw)}")
        opts = Pool2DOptions(*struct.unpack("<HHHH", raw))
        if 0 in (opts.pool_h, opts.pool_w, opts.stride_h, opts.stride_w):
            raise MalformedRecord("zero pool extent or stride")
        return opts
    if raw:
        raise MalformedRecord(f"{opcode.name} takes no options, got {len(raw)} bytes")
    return None


def parse_model(data: bytes) -> SerializedModel:
    """Parse and eagerly validate an SDLM byte string.

    The input is never modified; the returned view keeps its own immutable
    copy when handed a mutable buffer.
    """
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {data[:4]!r}")
    if len(data) < HEADER.size:
        raise TruncatedSection("header truncated")
    _, version, n_t, n_o, n_b, off_t, off_o, off_b, off_io = HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version} (supported: {VERSION})")
    header = Header(version, n_t, n_o, n_b, off_t, off_o, off_b, off_io)
    if not HEADER.size <= off_t <= off_o <= off_b <= off_io <= len(data):
        raise TruncatedSection("section offsets out of order or beyond end of file")

    r = _Reader(data, off_t, off_o, "tensor")
    if off_t != HEADER.size:
        raise NonCanonicalLayout("tensor table does not follow the header")
    tensors = []
    for _ in range(n_t):
        (name_len,) = r.take("<I")
        try:
            name = r.raw(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedRecord(f"tensor name is not UTF-8: {exc}") from None
        dtype_code, rank = r.take("<BB")
        dims = r.take(f"<{rank}I")
        (buf,) = r.take("<I")
        dtype = _enum(DType, dtype_code, "dtype")
        if any(d == 0 for d in dims):
            raise MalformedRecord(f"tensor {name!r} has a zero extent")
        tensors.append(TensorDesc(name, dtype, tuple(dims), None if buf == NO_BUFFER else buf))
    if r.pos != off_o:
        raise NonCanonicalLayout("gap between tensor and operator tables")

    r = _Reader(data, off_o, off_b, "operator")
    operators = []
    for _ in range(n_o):
        code, n_in, n_out = r.take("<BBB")
        opcode = _enum(Opcode, code, "opcode")
        idx = r.take(f"<{n_in + n_out}I")
        (opt_len,) = r.take("<I")
        options = _parse_options(opcode, r.raw(opt_len))
        operators.append(OperatorDesc(opcode, tuple(idx[:n_in]), tuple(idx[n_in:]), options))
    if r.pos != off_b:
        raise NonCanonicalLayout("gap between operator and buffer tables")

    r = _Reader(data, off_b, off_io, "buffer")
    spans = []
    for _ in range(n_b):
        (length,) = r.take("<Q")
        start = r.pos
        r.raw(length)
        pad = r.raw(-length % 4)
        if any(pad):
            raise MalformedRecord("non-zero buffer padding")
        spans.append((start, length))
    if r.pos != off_io:
        raise NonCanonicalLayout("gap between buffer and io tables")

    r = _Reader(data, off_io, len(data), "io")
    (n_in,) = r.take("<I")
    graph_inputs = r.take(f"<{n_in}I")
    (n_out,) = r.take("<I")
    graph_outputs = r.take(f"<{n_out}I")
    if r.pos != len(data):
        raise NonCanonicalLayout("trailing bytes after io table")

    graph = GraphDesc(tuple(tensors), tuple(operators), tuple(graph_inputs), tuple(graph_outputs))
    validate_graph(graph, [length for _, length in spans])
    return SerializedModel(data, header, graph, tuple(spans))


def validate_graph(graph: GraphDesc, buffer_lengths: Sequence[int]) -> None:
    """Check index ranges, arities, buffer sizes and topological order."""
    n_t = len(graph.tensors)
    for i, t in enumerate(graph.tensors):
        if t.buffer_index is None:
            continue
        if not 0 <= t.buffer_index < len(buffer_lengths):
            raise IndexOutOfRange(f"tensor {i} references buffer {t.buffer_index}")
        if buffer_lengths[t.buffer_index] != t.nbytes:
            raise BufferSizeMismatch(
                f"tensor {i} ({t.name!r}) needs {t.nbytes} bytes, "
                f"buffer {t.buffer_index} holds {buffer_lengths[t.buffer_index]}")
    for idx in graph.graph_inputs + graph.graph_outputs:
        if not 0 <= idx < n_t:
            raise IndexOutOfRange(f"graph io references tensor {idx}")

    available = set(graph.graph_inputs)
    available.update(i for i, t in enumerate(graph.tensors) if t.buffer_index is not None)
    for k, op in enumerate(graph.operators):
        if (len(op.inputs), len(op.outputs)) != ARITY[op.opcode]:
            raise ArityMismatch(
                f"operator {k} {op.opcode.name} has {len(op.inputs)} inputs / "
                f"{len(op.outputs)} outputs, expected {ARITY[op.opcode]}")
        for idx in op.inputs + op.outputs:
            if not 0 <= idx < n_t:
                raise IndexOutOfRange(f"operator {k} references tensor {idx}")
        missing = [i for i in op.inputs if i not in available]
        if missing:
            raise InvalidGraph(f"operator {k} consumes tensors {missing} before they are produced")
        available.update(op.outputs)
    for idx in graph.graph_outputs:
        if idx not in available:
            raise InvalidGraph(f"graph output {idx} is never produced")


def model_signature(m) -> tuple[list[int], int]:
    """Return ``(input_shape, num_labels)`` of a single-input, single-output graph."""
    g = m.graph
    if len(g.graph_inputs) != 1:
        raise MultipleInputs(f"graph has {len(g.graph_inputs)} inputs")
    if len(g.graph_outputs) != 1:
        raise MultipleOutputs(f"graph has {len(g.graph_outputs)} outputs")
    return list(g.tensors[g.graph_inputs[0]].shape), g.tensors[g.graph_outputs[0]].shape[-1]


# -- encoding --------------------------------------------------------------

def encode_model(graph: GraphDesc, buffers: Sequence[bytes]) -> bytes:
    """Emit the canonical byte layout. Callers validate the graph first."""
    tensor_tab = bytearray()
    for t in graph.tensors:
        name = t.name.encode("utf-8")
        tensor_tab += struct.pack("<I", len(name)) + name
        tensor_tab += struct.pack(f"<BB{len(t.shape)}I", t.dtype, len(t.shape), *t.shape)
        tensor_tab += struct.pack("<I", NO_BUFFER if t.buffer_index is None else t.buffer_index)

    op_tab = bytearray()
    for op in graph.operators:
        opts = b"" if op.options is None else op.options.pack()
        idx = op.inputs + op.outputs
        op_tab += struct.pack(f"<BBB{len(idx)}I", op.opcode, len(op.inputs), len(op.outputs), *idx)
        op_tab += struct.pack("<I", len(opts)) + opts

    buf_tab = bytearray()
    for b in buffers:
        buf_tab += struct.pack("<Q", len(b)) + bytes(b) + b"\0" * (-len(b) % 4)

    io_tab = struct.pack(f"<I{len(graph.graph_inputs)}I", len(graph.graph_inputs), *graph.graph_inputs)
    io_tab += struct.pack(f"<I{len(graph.graph_outputs)}I", len(graph.graph_outputs), *graph.graph_outputs)

    off_t = HEADER.size
    off_o = off_t + len(tensor_tab)
    off_b = off_o + len(op_tab)
    off_io = off_b + len(buf_tab)
    head = HEADER.pack(MAGIC, VERSION, len(graph.tensors), len(graph.operators), len(buffers),
                       off_t, off_o, off_b, off_io)
    return b"".join([head, tensor_tab, op_tab, buf_tab, io_tab])
