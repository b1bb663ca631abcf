"""Shared test utilities: random model generation and an independent SDLM encoder."""

import math
import struct

import numpy as np

from modelmark.builder import ModelBuilder
from modelmark.model_format import Conv2DOptions, Opcode, Padding, Pool2DOptions

_NAME_CHARS = list("abcdefghijklmnopqrstuvwxyz_/0123456789") + ["é", "ß", "λ", "文"]


def _name(rng, prefix):
    n = int(rng.integers(0, 6))
    return prefix + "".join(rng.choice(_NAME_CHARS, size=n))


def _conv_out(size, k, stride, padding):
    if padding is Padding.SAME:
        return math.ceil(size / stride)
    return (size - k) // stride + 1


def random_model(rng: np.random.Generator) -> bytes:
    """A random valid SDLM model: optional conv stages, then one or two FC layers."""
    b = ModelBuilder()
    h, w, c = (int(v) for v in rng.integers(3, 9, size=3))
    c = int(rng.integers(1, 4))
    x = b.input([h, w, c], name=_name(rng, "in"))
    for _ in range(int(rng.integers(0, 3))):
        k = int(rng.integers(1, min(h, w, 3) + 1))
        stride = int(rng.integers(1, 3))
        pad = Padding(int(rng.integers(0, 2)))
        oh, ow = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
        if min(oh, ow) < 1:
            break
        filters = int(rng.integers(1, 5))
        kern = b.constant(_name(rng, "k"), rng.normal(size=(filters, k, k, c)).astype(np.float32))
        bias = b.constant(_name(rng, "kb"), rng.normal(size=filters).astype(np.float32))
        x = b.op(Opcode.CONV_2D, [x, kern, bias], [oh, ow, filters], Conv2DOptions(stride, stride, pad),
                 name=_name(rng, "conv"))
        h, w, c = oh, ow, filters
        x = b.op(Opcode.RELU, [x], [h, w, c])
        if min(h, w) >= 2 and rng.random() < 0.5:
            h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
            x = b.op(Opcode.MAX_POOL_2D, [x], [h, w, c], Pool2DOptions(2, 2, 2, 2))
    x = b.op(Opcode.FLATTEN, [x], [h * w * c])
    feats = h * w * c
    for layer in range(int(rng.integers(1, 3))):
        out = int(rng.integers(2, 7))
        wt = b.constant(_name(rng, "w"), rng.normal(size=(out, feats)).astype(np.float32))
        bt = b.constant(_name(rng, "b"), rng.normal(size=out).astype(np.float32))
        x = b.op(Opcode.FULLY_CONNECTED, [x, wt, bt], [out])
        feats = out
        if layer == 0 and rng.random() < 0.5:
            x = b.op(Opcode.RELU, [x], [out])
    # odd-sized constants exercise buffer padding; they are never consumed
    for _ in range(int(rng.integers(0, 3))):
        n = int(rng.integers(1, 8))
        if rng.random() < 0.5:
            b.constant(_name(rng, "u8"), rng.integers(0, 256, size=n).astype(np.uint8))
        else:
            b.constant(_name(rng, "i32"), rng.integers(-1000, 1000, size=n).astype(np.int32))
    if rng.random() < 0.7:
        x = b.op(Opcode.SOFTMAX, [x], [feats])
    b.output(x)
    return b.build()


def reference_encode(tensors, operators, buffers, inputs, outputs) -> bytes:
    """Straight-line encoder written from the layout description, used as an oracle.

    ``tensors``: (name, dtype_code, dims, buffer_index or None)
    ``operators``: (opcode, ins, outs, options_bytes)
    """
    t_tab = b"".join(
        struct.pack("<I", len(n.encode())) + n.encode() + struct.pack("<BB", dt, len(dims))
        + struct.pack(f"<{len(dims)}I", *dims) + struct.pack("<I", 0xFFFFFFFF if buf is None else buf)
        for n, dt, dims, buf in tensors)
    o_tab = b"".join(
        struct.pack("<BBB", code, len(ins), len(outs)) + struct.pack(f"<{len(ins) + len(outs)}I", *ins, *outs)
        + struct.pack("<I", len(opts)) + opts
        for code, ins, outs, opts in operators)
    b_tab = b"".join(struct.pack("<Q", len(raw)) + raw + b"\0" * (-len(raw) % 4) for raw in buffers)
    io = struct.pack(f"<I{len(inputs)}I", len(inputs), *inputs) + struct.pack(f"<I{len(outputs)}I", len(outputs), *outputs)
    off_t = 36
    off_o = off_t + len(t_tab)
    off_b = off_o + len(o_tab)
    off_io = off_b + len(b_tab)
    header = struct.pack("<4s8I", b"SDLM", 1, len(tensors), len(operators), len(buffers), off_t, off_o, off_b, off_io)
    return header + t_tab + o_tab + b_tab + io


# one line per acceptance criterion, printed by the terminal-summary hook in conftest
ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
