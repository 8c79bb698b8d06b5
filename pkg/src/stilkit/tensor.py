"""Dense row-major tensors and the ``STEN`` binary file format.

Layout of a ``.sten`` file (little-endian)::

    bytes 0-3   magic b"STEN"
    byte  4     dtype code (0 = f32, 1 = f64)
    byte  5     rank (1..4)
    bytes 6-7   reserved, zero
    rank x u32  dims
    payload     row-major elements
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"STEN"
MAX_RANK = 4

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_NAMES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


class TensorError(ValueError):
    pass


class TensorFormatError(TensorError):
    pass


def _check_dims(dims: Sequence[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not 1 <= len(dims) <= MAX_RANK:
        raise TensorError(f"rank must be 1..{MAX_RANK}, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise TensorError(f"every dim must be >= 1, got {dims}")
    return dims


def _resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str) and dtype in _DTYPE_NAMES:
        return _DTYPE_NAMES[dtype]
    dt = np.dtype(dtype).newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise TensorError(f"unsupported dtype {dtype!r}; use f32 or f64")
    return dt


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable dense tensor backed by a read-only numpy array.

    ``Tensor`` converts to numpy through ``__array__`` so it can be passed
    straight to any array function.
    """

    array: np.ndarray

    def __post_init__(self):
        arr = self.array
        _check_dims(arr.shape)
        dt = _resolve_dtype(arr.dtype)
        if arr.dtype != dt or not arr.flags.c_contiguous or arr.flags.writeable:
            arr = np.array(arr, dtype=dt, order="C", copy=True)
            arr.flags.writeable = False
            object.__setattr__(self, "array", arr)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def rank(self) -> int:
        return self.array.ndim

    @property
    def dtype(self) -> str:
        return "f32" if self.array.dtype == np.float32 else "f64"

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the elements."""
        return self.array.reshape(-1)

    def __array__(self, dtype=None, copy=None):
        if dtype is not None and np.dtype(dtype) != self.array.dtype:
            return self.array.astype(dtype)
        return self.array

    def __getitem__(self, index):
        return self.array[index]

    def __len__(self) -> int:
        return self.array.shape[0]

    def offset(self, index: Sequence[int]) -> int:
        """Flat row-major offset of a multi-index, bounds-checked."""
        if len(index) != self.rank:
            raise IndexError(f"expected {self.rank} indices, got {len(index)}")
        flat = 0
        for i, d in zip(index, self.dims):
            if not 0 <= i < d:
                raise IndexError(f"index {tuple(index)} out of bounds for {self.dims}")
            flat = flat * d + i
        return flat

    def equal(self, other: "Tensor") -> bool:
        """Bitwise equality of dims, dtype and payload."""
        return (
            self.dims == other.dims
            and self.array.dtype == other.array.dtype
            and self.array.tobytes() == other.array.tobytes()
        )

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.dtype})"


def create(dims: Sequence[int], fill: float | None = None, data: Iterable[float] | None = None,
           dtype="f64") -> Tensor:
    """Build a tensor from either a fill value or a flat row-major ``data``."""
    dims = _check_dims(dims)
    dt = _resolve_dtype(dtype)
    if data is not None:
        flat = np.asarray(list(data) if not isinstance(data, np.ndarray) else data, dtype=dt).reshape(-1)
        expected = int(np.prod(dims))
        if flat.size != expected:
            raise TensorError(f"data length {flat.size} does not match dims {dims} ({expected})")
        return Tensor(flat.reshape(dims))
    return Tensor(np.full(dims, 0.0 if fill is None else fill, dtype=dt))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor) and dtype is None:
        return x
    arr = np.asarray(x)
    return Tensor(arr.astype(_resolve_dtype(dtype or ("f32" if arr.dtype == np.float32 else "f64"))))


def check_permutation(axes: Sequence[int], rank: int) -> tuple[int, ...]:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(rank)):
        raise TensorError(f"{axes} is not a permutation of 0..{rank - 1}")
    return axes


def inverse_permutation(axes: Sequence[int]) -> tuple[int, ...]:
    inv = [0] * len(axes)
    for i, a in enumerate(axes):
        inv[a] = i
    return tuple(inv)


def permute(t: Tensor, axes: Sequence[int]) -> Tensor:
    """Reorder axes so that ``out.dims[i] == t.dims[axes[i]]`` (explicit copy)."""
    axes = check_permutation(axes, t.rank)
    return Tensor(np.ascontiguousarray(t.array.transpose(axes)))


def to_bytes(t: Tensor) -> bytes:
    header = MAGIC + struct.pack("<BBxx", _DTYPE_CODES[t.array.dtype], t.rank)
    header += struct.pack(f"<{t.rank}I", *t.dims)
    return header + t.array.tobytes(order="C")


def from_bytes(buf: bytes) -> Tensor:
    if len(buf) < 8:
        raise TensorFormatError("truncated header")
    if buf[:4] != MAGIC:
        raise TensorFormatError("bad magic")
    code, rank, r0, r1 = struct.unpack_from("<BBBB", buf, 4)
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError(f"bad rank {rank}")
    if r0 or r1:
        raise TensorFormatError("reserved bytes must be zero")
    if len(buf) < 8 + 4 * rank:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    dims = _check_dims(dims)
    dt = _CODE_DTYPES[code]
    start = 8 + 4 * rank
    nbytes = int(np.prod(dims)) * dt.itemsize
    payload = buf[start:]
    if len(payload) != nbytes:
        raise TensorFormatError(
            f"truncated payload: expected {nbytes} bytes, found {len(payload)}"
            if len(payload) < nbytes else "trailing bytes after payload"
        )
    return Tensor(np.frombuffer(payload, dtype=dt).reshape(dims))


def save(t: Tensor, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(as_tensor(t)))


def load(path: str | os.PathLike) -> Tensor:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
