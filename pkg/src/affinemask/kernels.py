"""Hot numeric kernels: convolution and max pooling.

Two implementations share one contract. The compiled extension
(``affinemask._ckernels``) handles float32 max pooling and small stride-1
convolutions; the numpy versions handle everything else and serve as the
fallback when the extension is not built. Set ``AFFINEMASK_PURE=1`` to force the fallback.

The two backends agree to float32 rounding, not bit for bit; each one is
deterministic on its own.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    if os.environ.get("AFFINEMASK_PURE", "") not in ("", "0"):
        raise ImportError("pure backend requested")
    from . import _ckernels
except ImportError:
    _ckernels = None

BACKEND = "cython" if _ckernels is not None else "numpy"


def _windows(x, kh, kw, stride, pad):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # (N, C, OH, OW, KH, KW)


def conv2d_forward_numpy(x, w, stride, pad):
    win = _windows(x, w.shape[2], w.shape[3], stride, pad)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, OH, OW, F)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_numpy(x, w, gout, stride, pad):
    kh, kw = w.shape[2], w.shape[3]
    win = _windows(x, kh, kw, stride, pad)
    gw = np.tensordot(gout, win, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, KH, KW)
    n, c, h, wd = x.shape
    oh, ow = gout.shape[2], gout.shape[3]
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            contrib = np.tensordot(gout, w[:, :, ki, kj], axes=([1], [0]))  # (N, OH, OW, C)
            gxp[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += contrib.transpose(0, 3, 1, 2)
    gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
    return np.ascontiguousarray(gx), gw.astype(w.dtype, copy=False)


def maxpool2d_forward_numpy(x, k):
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    blocks = x[:, :, :oh * k, :ow * k].reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, oh, ow, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg


def maxpool2d_backward_numpy(gout, arg, k, h, w):
    n, c, oh, ow = gout.shape
    blocks = np.zeros((n, c, oh, ow, k * k), dtype=gout.dtype)
    np.put_along_axis(blocks, arg[..., None], gout[..., None], axis=-1)
    blocks = blocks.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * k, ow * k)
    gx = np.zeros((n, c, h, w), dtype=gout.dtype)
    gx[:, :, :oh * k, :ow * k] = blocks
    return gx


def _fast(*arrays):
    return _ckernels is not None and all(a.dtype == np.float32 for a in arrays)


# Above this many multiply-adds per output pixel (C*KH*KW*F) numpy's BLAS
# contraction beats the direct loops; strided convs always go to numpy.
COMPILED_CONV_MAX_WORK = 2048


def _compiled_conv(x, w, stride) -> bool:
    return _fast(x, w) and stride == 1 and w.shape[0] * w.shape[1] * w.shape[2] * w.shape[3] <= COMPILED_CONV_MAX_WORK


def conv2d_forward_compiled(x, w, stride, pad):
    x, w = np.ascontiguousarray(x), np.ascontiguousarray(w)
    if stride == 1:
        return _ckernels.conv2d_forward_s1(x, w, pad)
    return _ckernels.conv2d_forward(x, w, stride, pad)


def conv2d_backward_compiled(x, w, gout, stride, pad):
    x, w, gout = np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(gout)
    if stride == 1:
        return _ckernels.conv2d_backward_s1(x, w, gout, pad)
    return _ckernels.conv2d_backward(x, w, gout, stride, pad)


def conv2d_forward(x, w, stride, pad):
    if _compiled_conv(x, w, stride):
        return conv2d_forward_compiled(x, w, stride, pad)
    return conv2d_forward_numpy(x, w, stride, pad)


def conv2d_backward(x, w, gout, stride, pad):
    if _compiled_conv(x, w, stride) and gout.dtype == np.float32:
        return conv2d_backward_compiled(x, w, gout, stride, pad)
    return conv2d_backward_numpy(x, w, gout, stride, pad)


def maxpool2d_forward(x, k):
    if _fast(x):
        return _ckernels.maxpool2d_forward(np.ascontiguousarray(x), k)
    return maxpool2d_forward_numpy(x, k)


def maxpool2d_backward(gout, arg, k, h, w):
    if _fast(gout):
        return _ckernels.maxpool2d_backward(
            np.ascontiguousarray(gout), np.ascontiguousarray(arg, dtype=np.intp), k, h, w
        )
    return maxpool2d_backward_numpy(gout, arg, k, h, w)
