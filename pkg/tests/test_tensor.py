import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stilkit import tensor as tn


def test_create_fill_and_data():
    t = tn.create((2, 2), fill=0)
    assert t.dims == (2, 2)
    assert t.array.tolist() == [[0, 0], [0, 0]]
    s = tn.create((1,), data=[3.5])
    assert s.data.tolist() == [3.5]


@pytest.mark.parametrize("dims,data", [((2, 3), range(5)), ((0, 2), None), ((), None), ((1, 1, 1, 1, 1), None)])
def test_create_errors(dims, data):
    with pytest.raises(tn.TensorError):
        tn.create(dims, data=data)


def test_tensor_is_read_only():
    t = tn.create((3,), data=[1, 2, 3])
    with pytest.raises(ValueError):
        t.array[0] = 5


def test_offset_row_major_and_bounds():
    t = tn.create((2, 3, 4), fill=0)
    for idx in itertools.product(range(2), range(3), range(4)):
        assert t.offset(idx) == np.ravel_multi_index(idx, (2, 3, 4))
    with pytest.raises(IndexError):
        t.offset((2, 0, 0))


def test_permute_shape():
    t = tn.create((2, 1, 3, 4), fill=1.0)
    assert tn.permute(t, (3, 1, 2, 0)).dims == (4, 1, 3, 2)


def test_permute_identity_bitwise(rng):
    t = tn.Tensor(rng.normal(size=(2, 3, 4, 5)))
    assert tn.permute(t, (0, 1, 2, 3)).equal(t)


def test_permute_matches_element_loop(rng):
    t = tn.Tensor(rng.normal(size=(2, 3, 4, 5)))
    axes = (2, 0, 3, 1)
    p = tn.permute(t, axes)
    for idx in itertools.product(*map(range, t.dims)):
        out_idx = tuple(idx[a] for a in axes)
        assert p.data[p.offset(out_idx)] == t.data[t.offset(idx)]
    assert tn.permute(p, tn.inverse_permutation(axes)).equal(t)


def test_permute_rejects_bad_axes():
    t = tn.create((2, 2), fill=0)
    with pytest.raises(tn.TensorError):
        tn.permute(t, (0, 0))


@settings(max_examples=40, deadline=None)
@given(dims=st.lists(st.integers(1, 4), min_size=1, max_size=4), data=st.data())
def test_permute_inverse_roundtrip_property(dims, data):
    perm = data.draw(st.permutations(range(len(dims))))
    arr = np.arange(int(np.prod(dims)), dtype=np.float64).reshape(dims) * 0.37
    t = tn.Tensor(arr)
    assert tn.permute(tn.permute(t, perm), tn.inverse_permutation(perm)).equal(t)


@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_save_load_roundtrip(tmp_path, rng, dtype):
    t = tn.as_tensor(rng.normal(size=(3, 2, 5)), dtype=dtype)
    tn.save(t, tmp_path / "t.sten")
    back = tn.load(tmp_path / "t.sten")
    assert back.equal(t)
    assert back.dtype == dtype


def test_file_size_rank4_f32(tmp_path, rng):
    # 4 magic + 1 dtype + 1 rank + 2 reserved, then 4 u32 dims, then 2048 f32 elements
    expected = 8 + 4 * 4 + 4 * (8 * 4 * 8 * 8)
    t = tn.as_tensor(rng.normal(size=(8, 4, 8, 8)), dtype="f32")
    tn.save(t, tmp_path / "x.sten")
    assert (tmp_path / "x.sten").stat().st_size == expected == 8216


def test_header_layout():
    raw = tn.to_bytes(tn.create((2, 3), data=range(6)))
    assert raw[:4] == b"STEN"
    assert struct.unpack_from("<BBBB", raw, 4) == (1, 2, 0, 0)
    assert struct.unpack_from("<II", raw, 8) == (2, 3)
    assert np.frombuffer(raw[16:], "<f8").tolist() == [0, 1, 2, 3, 4, 5]


def test_bad_magic(tmp_path):
    raw = bytearray(tn.to_bytes(tn.create((2,), fill=1.0)))
    raw[:4] = b"XXXX"
    (tmp_path / "bad.sten").write_bytes(bytes(raw))
    with pytest.raises(tn.TensorFormatError, match="bad magic"):
        tn.load(tmp_path / "bad.sten")


def test_truncated_payload(tmp_path):
    raw = tn.to_bytes(tn.create((4,), fill=1.0))
    (tmp_path / "short.sten").write_bytes(raw[:-3])
    with pytest.raises(tn.TensorFormatError, match="truncated"):
        tn.load(tmp_path / "short.sten")


def test_load_missing_file(tmp_path):
    with pytest.raises(OSError):
        tn.load(tmp_path / "nope.sten")
