"""Dense float tensors with reverse-mode automatic differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent. Calling
:meth:`Tensor.backward` on a scalar walks that graph once, in reverse
topological order, summing gradients where a tensor is used more than once.

Data is float32 unless a float64 array is passed in explicitly (used by the
finite-difference checks).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels

DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) and dtype is None:
        return data
    return np.asarray(data, dtype=dtype or DTYPE)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numel(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _wrap(x, dtype=DTYPE) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def custom_grad(
    x: Tensor,
    forward_fn: Callable[[np.ndarray], np.ndarray],
    backward_scale_fn: Callable[[np.ndarray], np.ndarray],
) -> Tensor:
    """Elementwise op whose backward multiplies the incoming gradient by
    ``backward_scale_fn(input)`` instead of the true derivative of ``forward_fn``."""
    xd = x.data
    out = np.asarray(forward_fn(xd), dtype=x.dtype)
    return _make(out, (x,), lambda g: ((g * backward_scale_fn(xd)).astype(x.dtype, copy=False),))


# layers


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` with ``x`` of shape [N, Din] and ``w`` of shape [Dout, Din]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"dense: bias {b.shape} does not match {w.shape[0]} outputs")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if w.requires_grad else None
        gb = g.sum(axis=0) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, bw)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Bias-free 2-D cross-correlation, NCHW input and [Cout, Cin, Kh, Kw] weights."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} pad={pad}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {cw}")
    for size, k in ((h, kh), (wd, kw)):
        span = size + 2 * pad - k
        if span < 0 or span % stride:
            raise DimensionError(f"conv2d: output size ({size}+2*{pad}-{k})/{stride}+1 is not an integer >= 1")
    out = kernels.conv2d_forward(x.data, w.data, stride, pad)
    xd, wdat = x.data, w.data

    def bw(g):
        gx, gw = kernels.conv2d_backward(xd, wdat, g, stride, pad)
        return gx, gw

    return _make(out, (x, w), bw)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pooling with window and stride ``k``."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-D input, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if k < 1 or h % k or w % k:
        raise DimensionError(f"maxpool2d: spatial size {h}x{w} not divisible by {k}")
    out, arg = kernels.maxpool2d_forward(x.data, k)
    return _make(out, (x,), lambda g: (kernels.maxpool2d_backward(g, arg, k, h, w),))


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W) of an NCHW tensor.

    In training mode the batch statistics normalize the input and the
    running buffers are updated in place by an exponential moving average
    (unbiased variance). In eval mode the running buffers are used.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm expects 4-D input, got {x.shape}")
    n, c = x.shape[0], x.shape[1]
    if n == 0:
        raise ValueError("batchnorm: empty batch")
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise DimensionError(f"batchnorm: parameters do not match {c} channels")
    xd = x.data
    dt = xd.dtype
    shape = (1, c, 1, 1)
    if training:
        m = n * x.shape[2] * x.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        m = None
        mean, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
    xhat = (xd - mean.reshape(shape)) * inv.reshape(shape)
    gd = gamma.data.reshape(shape)
    out = gd * xhat + beta.data.reshape(shape)

    def bw(g):
        gsum = g.sum(axis=(0, 2, 3))
        gxhat_sum = (g * xhat).sum(axis=(0, 2, 3))
        if not x.requires_grad:
            gx = None
        elif training:
            gx = (gd * inv.reshape(shape) / m) * (
                m * g - gsum.reshape(shape) - xhat * gxhat_sum.reshape(shape)
            )
        else:
            gx = g * (gd * inv.reshape(shape))
        return gx, gxhat_sum, gsum

    return _make(out.astype(dt, copy=False), (x, gamma, beta), bw)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of the negative log softmax probability of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    n, k = logits.shape
    if n == 0:
        raise ValueError("cross entropy: empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross entropy: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return ((g / n) * p).astype(logits.dtype, copy=False),

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)
