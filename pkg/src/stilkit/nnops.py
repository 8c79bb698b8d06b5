"""Forward kernels for every primitive used by the STIL block.

All functions take and return plain ``numpy`` arrays (``Tensor`` objects are
accepted anywhere an array is).  Batched image tensors use the (N, C, H, W)
layout; convolution is cross-correlation with stride 1 and zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvKernel:
    weights: np.ndarray  # (C_out, C_in, k_h, k_w)
    bias: np.ndarray  # (C_out,)

    def __post_init__(self):
        w = np.asarray(self.weights)
        b = np.asarray(self.bias)
        if w.ndim != 4:
            raise ShapeError(f"conv weights must be rank 4, got {w.shape}")
        if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {w.shape[2:]}")
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {b.shape} does not match C_out={w.shape[0]}")

    @property
    def same_pad(self) -> tuple[int, int]:
        kh, kw = np.shape(self.weights)[2:]
        return (kh - 1) // 2, (kw - 1) // 2


@dataclass(frozen=True)
class Conv1dKernel:
    weights: np.ndarray  # (3,)
    bias: float = 0.0

    def __post_init__(self):
        if np.shape(self.weights) != (3,):
            raise ShapeError(f"1D channel kernel must have exactly 3 taps, got {np.shape(self.weights)}")


def same_pad(w) -> tuple[int, int]:
    kh, kw = np.shape(w)[2:]
    return (kh - 1) // 2, (kw - 1) // 2


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d(x, w, b=None, pad: tuple[int, int] | None = None) -> np.ndarray:
    """Stride-1 zero-padded cross-correlation plus bias.

    ``pad`` defaults to same padding.  Implemented as a sum over kernel taps,
    each tap a channel contraction over a shifted view of the padded input.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weights, got {x.shape}, {w.shape}")
    n, c_in, h, wd = x.shape
    c_out, c_w, kh, kw = w.shape
    if c_w != c_in:
        raise ShapeError(f"channel mismatch: input has {c_in}, kernel expects {c_w}")
    ph, pw = same_pad(w) if pad is None else pad
    ho, wo = h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{wd + 2 * pw}")
    xp = _pad_hw(x, ph, pw)
    out = np.zeros((c_out, n, ho, wo), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(w[:, :, i, j], xp[:, :, i:i + ho, j:j + wo], axes=(1, 1))
    out = out.transpose(1, 0, 2, 3)
    if b is not None:
        out = out + np.asarray(b).reshape(1, c_out, 1, 1)
    return np.ascontiguousarray(out)


def avg_pool_2x2(x) -> np.ndarray:
    x = np.asarray(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool_2x2 needs even spatial dims, got {h}x{w}")
    # fixed summation order keeps results reproducible element by element
    return (x[:, :, 0::2, 0::2] + x[:, :, 0::2, 1::2] + x[:, :, 1::2, 0::2] + x[:, :, 1::2, 1::2]) * 0.25


def pad_to_even(x) -> np.ndarray:
    """Replicate the last row and/or column so H and W become even.

    Pooling the padded map is ceil-mode pooling: a window that overhangs an
    odd edge averages only the valid entries.
    """
    x = np.asarray(x)
    h, w = x.shape[2:]
    if h % 2 == 0 and w % 2 == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (0, h % 2), (0, w % 2)), mode="edge")


def crop_hw(x, h: int, w: int) -> np.ndarray:
    x = np.asarray(x)
    if h > x.shape[2] or w > x.shape[3]:
        raise ShapeError(f"cannot crop {x.shape[2:]} to {(h, w)}")
    return np.ascontiguousarray(x[:, :, :h, :w])


def upsample_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """(2n, n) interpolation matrix for half-pixel-center bilinear 2x upsampling."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for d in range(2 * n):
        src = min(max((d + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[d, i0] += 1.0 - frac
        m[d, i1] += frac
    return m


def upsample_bilinear_2x(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample expects (N,C,h,w), got {x.shape}")
    uh = upsample_matrix(x.shape[2], x.dtype)
    uw = upsample_matrix(x.shape[3], x.dtype)
    return np.ascontiguousarray(np.einsum("ph,nchw,qw->ncpq", uh, x, uw, optimize=True))


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.result_type(x, np.float32))
    # exp(-|x|) never overflows; exact 0.5 at x == 0.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x), 0.0)


def gap_spatial(x) -> np.ndarray:
    """(N, C, H, W) -> (N, C) mean over H and W."""
    return np.asarray(x).mean(axis=(2, 3))


def conv1d_channels(v, w, b: float = 0.0) -> np.ndarray:
    """Slide a 3-tap kernel along the channel axis of (N, C), zero-padded by 1."""
    v = np.asarray(v)
    w = np.asarray(w)
    if w.shape != (3,):
        raise ShapeError(f"conv1d kernel must have 3 taps, got {w.shape}")
    vp = np.pad(v, ((0, 0), (1, 1)))
    c = v.shape[1]
    return w[0] * vp[:, 0:c] + w[1] * vp[:, 1:c + 1] + w[2] * vp[:, 2:c + 2] + b


def scale_channels(x, s) -> np.ndarray:
    """Multiply (N, C, H, W) by per-(N, C) weights broadcast over H, W."""
    x = np.asarray(x)
    s = np.asarray(s)
    if s.shape != x.shape[:2]:
        raise ShapeError(f"channel weights {s.shape} do not match {x.shape[:2]}")
    return x * s[:, :, None, None]


def split_channels(x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x)
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"cannot split odd channel count {c}")
    return np.ascontiguousarray(x[:, : c // 2]), np.ascontiguousarray(x[:, c // 2:])


def concat_channels(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != b.ndim or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concat {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def _same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"shape mismatch {np.shape(a)} vs {np.shape(b)}")


def add(a, b) -> np.ndarray:
    _same_shape(a, b)
    return np.asarray(a) + np.asarray(b)


def sub(a, b) -> np.ndarray:
    _same_shape(a, b)
    return np.asarray(a) - np.asarray(b)


def mul(a, b) -> np.ndarray:
    _same_shape(a, b)
    return np.asarray(a) * np.asarray(b)


def scale(a, k: float) -> np.ndarray:
    return np.asarray(a) * k


def frame_difference(a, b, axis: int) -> np.ndarray:
    """``out[t] = a[t+1] - b[t]`` along ``axis``; the last frame is a zero map."""
    a = np.asarray(a)
    b = np.asarray(b)
    _same_shape(a, b)
    out = np.zeros_like(a)
    n = a.shape[axis]
    if n > 1:
        dst = [slice(None)] * a.ndim
        nxt = [slice(None)] * a.ndim
        dst[axis] = slice(0, n - 1)
        nxt[axis] = slice(1, n)
        out[tuple(dst)] = a[tuple(nxt)] - b[tuple(dst)]
    return out


def subsample_2x(x) -> np.ndarray:
    """Keep every other row and column; turns a stride-1 conv into stride 2."""
    return np.ascontiguousarray(np.asarray(x)[:, :, ::2, ::2])
