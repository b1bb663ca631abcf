import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modelmark.datasets import Batch, decode_sds, encode_sds, load_sds, save_sds
from modelmark.errors import BadDataset


def test_layout_by_hand():
    b = Batch(np.array([[1.0, 2.0]], dtype=np.float32), np.array([7]))
    expected = b"SDS1" + struct.pack("<IBI", 1, 1, 2) + struct.pack("<2f", 1, 2) + struct.pack("<I", 7)
    assert encode_sds(b) == expected


def test_unlabeled_roundtrip(tmp_path):
    b = Batch(np.zeros((3, 2, 2, 1)))
    save_sds(tmp_path / "x.sds", b)
    back = load_sds(tmp_path / "x.sds")
    assert back.labels is None and back.data.shape == (3, 2, 2, 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.booleans())
def test_roundtrip(seed, labeled):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 5, size=int(rng.integers(1, 4))))
    n = int(rng.integers(0, 6))
    data = rng.normal(size=(n, *shape)).astype(np.float32)
    b = Batch(data, rng.integers(0, 10, size=n) if labeled else None)
    back = decode_sds(encode_sds(b))
    np.testing.assert_array_equal(back.data, data)
    if labeled and n:
        np.testing.assert_array_equal(back.labels, b.labels)
    assert encode_sds(back) == encode_sds(b)


def test_bad_magic_and_length():
    good = encode_sds(Batch(np.zeros((2, 3)), np.array([0, 1])))
    with pytest.raises(BadDataset):
        decode_sds(b"XXXX" + good[4:])
    with pytest.raises(BadDataset):
        decode_sds(good[:-1])
    with pytest.raises(BadDataset):
        decode_sds(good[:6])


def test_mixed_labels_rejected():
    raw = b"SDS1" + struct.pack("<IBI", 2, 1, 1) + struct.pack("<2f", 0, 0) + struct.pack("<2I", 0, 0xFFFFFFFF)
    with pytest.raises(BadDataset):
        decode_sds(raw)


def test_batch_validation():
    with pytest.raises(ValueError):
        Batch(np.array([[np.nan]]))
    with pytest.raises(ValueError):
        Batch(np.zeros((2, 1)), np.array([0]))


def test_take_and_concat():
    b = Batch(np.arange(6.0).reshape(3, 2), np.array([0, 1, 2]))
    c = Batch.concat([b.take([2]), b.take([0])])
    np.testing.assert_array_equal(c.data, [[4, 5], [0, 1]])
    assert c.labels.tolist() == [2, 0]
