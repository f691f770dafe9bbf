"""Dense float tensors with reverse-mode automatic differentiation.

Covers exactly the operator set the networks in this package need:
convolution, dense layers, layer/batch norm, relu/sigmoid/softmax, global
and 2x2 pooling, nearest upsampling, elementwise arithmetic, reductions,
erf, and concatenation. Training runs in float32; a float64 shadow mode is
used by the finite-difference gradient checker.
"""

from __future__ import annotations

import logging
import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special as _sp_special

from . import kernels
from .backend import debug_checks_enabled

_logger = logging.getLogger("latentclass")

DTYPE = np.float32

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager disabling graph recording (eval-time forward passes)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """N-d array of 32-bit (or 64-bit shadow) reals with an optional grad slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor construction rejected: data contains NaN/Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable] = None
        self._done = False

    # -- introspection ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return _result(self.data.copy(), ())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- grad bookkeeping -------------------------------------------------
    def zero_grad(self):
        self.grad = None

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_coerce(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other, self.dtype), mul(self, -1.0))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __pow__(self, p):
        return power(self, p)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Optional[Callable] = None) -> Tensor:
    """Build an op-result tensor, wiring it into the graph when recording."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._done = False
    tracked = tuple(p for p in parents if p.requires_grad) if _grad_enabled() else ()
    out.requires_grad = bool(tracked)
    out._parents = tracked if backward is not None and tracked else ()
    out._backward_fn = backward if out._parents else None
    if debug_checks_enabled() and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by tensor op")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce grad of a broadcast result back to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise arithmetic ------------------------------------------------


def add(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DTYPE))
    b = _coerce(b, a.dtype)

    def backward(out):
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DTYPE))
    b = _coerce(b, a.dtype)

    def backward(out):
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DTYPE))
    b = _coerce(b, a.dtype)

    def backward(out):
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape))

    return _result(a.data / b.data, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def backward(out):
        a._accum(out.grad * p * np.power(a.data, p - 1.0))

    return _result(np.power(a.data, p), (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward(out):
        a._accum(out.grad * y)

    return _result(y, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(out):
        a._accum(out.grad / a.data)

    return _result(np.log(a.data), (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)

    def backward(out):
        a._accum(out.grad * 0.5 / y)

    return _result(y, (a,), backward)


def erf(a: Tensor) -> Tensor:
    two_over_sqrt_pi = a.dtype.type(2.0 / np.sqrt(np.pi))

    def backward(out):
        a._accum(out.grad * two_over_sqrt_pi * np.exp(-a.data * a.data))

    return _result(_sp_special.erf(a.data).astype(a.dtype), (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp bounds reversed: lo={lo} > hi={hi}")
    mask = ((a.data >= lo) & (a.data <= hi)).astype(a.dtype)

    def backward(out):
        a._accum(out.grad * mask)

    return _result(np.clip(a.data, lo, hi), (a,), backward)


# -- reductions & shape ------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape).copy())

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]

    def backward(out):
        g = out.grad / n
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape).copy())

    return _result(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(out):
        a._accum(out.grad.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                t._accum(out.grad[tuple(idx)])

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- activations -------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(a.dtype)

    def backward(out):
        a._accum(out.grad * mask)

    return _result(a.data * mask, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    y = y.astype(a.dtype)

    def backward(out):
        a._accum(out.grad * y * (1.0 - y))

    return _result(y, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = (e / e.sum(axis=axis, keepdims=True)).astype(a.dtype)

    def backward(out):
        dot = (out.grad * y).sum(axis=axis, keepdims=True)
        a._accum((out.grad - dot) * y)

    return _result(y, (a,), backward)


# -- dense / norm layers ------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map weight @ x + bias; x is (N_in,) or (B, N_in)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"linear dimension mismatch: input {x.shape} vs weight {weight.shape}"
        )
    y = x.data @ weight.data.T
    if bias is not None:
        y = y + bias.data

    def backward(out):
        g = out.grad
        if x.requires_grad:
            x._accum(g @ weight.data)
        if weight.requires_grad:
            if g.ndim == 1:
                weight._accum(np.outer(g, x.data))
            else:
                weight._accum(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accum(g if g.ndim == 1 else g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(y, parents, backward)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis with population variance."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mu) * inv).astype(x.dtype)
    n = x.shape[-1]

    def backward(out):
        g = out.grad
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        x._accum(inv * (g - gm - xhat * gx))

    return _result(xhat, (x,), backward)


class BatchNormState:
    """Per-channel running statistics buffer for batch norm."""

    def __init__(self, channels: int, dtype=DTYPE):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.initialized = False

    def copy_from(self, other: "BatchNormState"):
        self.mean = other.mean.copy()
        self.var = other.var.copy()
        self.initialized = other.initialized


_warned_uninit_bn = False


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel standardization of (C,H,W) or (B,C,H,W) input.

    Train mode normalizes with batch statistics and updates the running
    buffers; eval mode uses the stored running statistics. Eval before any
    train step falls back to identity stats (mean 0, var 1) and logs once.
    """
    global _warned_uninit_bn
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm mode must be train|eval, got {mode!r}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    b, c, h, w = xd.shape
    g = gamma.data.reshape(1, c, 1, 1)
    bt = beta.data.reshape(1, c, 1, 1)

    if mode == "train":
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        state.mean = ((1.0 - momentum) * state.mean + momentum * mu).astype(state.mean.dtype)
        state.var = ((1.0 - momentum) * state.var + momentum * var).astype(state.var.dtype)
        state.initialized = True
    else:
        if not state.initialized and not _warned_uninit_bn:
            _logger.warning("batch_norm eval before any train step: using identity stats")
            _warned_uninit_bn = True
        mu, var = state.mean, state.var

    inv = (1.0 / np.sqrt(var + eps)).reshape(1, c, 1, 1).astype(xd.dtype)
    xhat = (xd - mu.reshape(1, c, 1, 1)) * inv
    y = (g * xhat + bt).astype(xd.dtype)
    m = b * h * w

    def backward(out):
        go = out.grad[None] if squeeze else out.grad
        if gamma.requires_grad:
            gamma._accum((go * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accum(go.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gx_hat = go * g
            if mode == "train":
                mean_g = gx_hat.mean(axis=(0, 2, 3), keepdims=True)
                mean_gx = (gx_hat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                dx = inv * (gx_hat - mean_g - xhat * mean_gx)
            else:
                dx = gx_hat * inv
            x._accum(dx[0] if squeeze else dx)

    return _result(y[0] if squeeze else y, (x, gamma, beta), backward)


# -- convolution and pooling ---------------------------------------------------


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation of (C,H,W) or (B,C,H,W) input with (Co,Ci,k,k) weight."""
    k = weight.shape[2]
    # networks use 1/3/5; 11 admits the SSIM Gaussian window
    if k % 2 == 0 or not 1 <= k <= 11:
        raise ValueError(f"conv2d kernel size must be odd and <= 11, got {k}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(
            f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}"
        )
    if xd.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {xd.shape[1]} channels, "
            f"weight expects {weight.shape[1]}"
        )
    h, w_in = xd.shape[2], xd.shape[3]
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w_in + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d output would be empty: input {h}x{w_in}, k={k}, "
            f"stride={stride}, padding={padding}"
        )
    y = kernels.conv2d_fwd(xd, weight.data, stride, padding)
    if bias is not None:
        y = y + bias.data.reshape(1, -1, 1, 1)

    def backward(out):
        go = out.grad[None] if squeeze else out.grad
        go = np.ascontiguousarray(go)
        if x.requires_grad:
            dx = kernels.conv2d_bwd_input(go, weight.data, stride, padding, h, w_in)
            x._accum(dx[0] if squeeze else dx)
        if weight.requires_grad:
            weight._accum(kernels.conv2d_bwd_weight(go, xd, k, stride, padding))
        if bias is not None and bias.requires_grad:
            bias._accum(go.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(y[0] if squeeze else y, parents, backward)


def avg_pool_global(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (C,H,W)->(C,) or (B,C,H,W)->(B,C)."""
    hw = x.shape[-1] * x.shape[-2]

    def backward(out):
        g = out.grad[..., None, None] / hw
        x._accum(np.broadcast_to(g, x.shape).copy())

    return _result(x.data.mean(axis=(-2, -1)), (x,), backward)


def max_pool_global(x: Tensor) -> Tensor:
    """Per-channel spatial max; ties split the subgradient equally."""
    y = x.data.max(axis=(-2, -1))

    def backward(out):
        mask = (x.data == y[..., None, None]).astype(x.dtype)
        mask /= mask.sum(axis=(-2, -1), keepdims=True)
        x._accum(mask * out.grad[..., None, None])

    return _result(y, (x,), backward)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k mean pooling; trailing rows/cols are dropped."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    b, c, h, w = xd.shape
    ho, wo = h // k, w // k
    xc = xd[:, :, : ho * k, : wo * k].reshape(b, c, ho, k, wo, k)
    y = xc.mean(axis=(3, 5))

    def backward(out):
        go = out.grad[None] if squeeze else out.grad
        g = np.zeros_like(xd)
        tile = np.repeat(np.repeat(go, k, axis=2), k, axis=3) / (k * k)
        g[:, :, : ho * k, : wo * k] = tile
        x._accum(g[0] if squeeze else g)

    return _result(y[0] if squeeze else y, (x,), backward)


def crop_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w spatial window of (...,H,W)."""
    if h > x.shape[-2] or w > x.shape[-1]:
        raise ValueError(f"cannot crop {x.shape[-2:]} to larger {(h, w)}")

    def backward(out):
        g = np.zeros_like(x.data)
        g[..., :h, :w] = out.grad
        x._accum(g)

    return _result(np.ascontiguousarray(x.data[..., :h, :w]), (x,), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Repeat each spatial element 2x2."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    y = np.repeat(np.repeat(xd, 2, axis=2), 2, axis=3)

    def backward(out):
        go = out.grad[None] if squeeze else out.grad
        b, c, h2, w2 = go.shape
        g = go.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        x._accum(g[0] if squeeze else g)

    return _result(y[0] if squeeze else y, (x,), backward)


# -- backward pass -------------------------------------------------------------


def _toposort(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate grads of every reachable requires_grad tensor from a scalar loss."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise RuntimeError("backward already ran for this graph; re-run the forward pass")
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None:
            node._backward_fn(node)
            node._backward_fn = None  # release closure memory
    loss._done = True


# -- gradient checking ----------------------------------------------------------


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be a pure scalar-valued function of x. When an rng is supplied,
    inputs with any element within 10*h of zero (relu kinks) are redrawn.
    Error metric: |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    data = np.asarray(x.data, dtype=np.float64)
    if rng is not None:
        tries = 0
        while np.any(np.abs(data) < 10.0 * h):
            data = rng.standard_normal(data.shape)
            tries += 1
            if tries > 100:
                raise RuntimeError("could not sample inputs away from relu kinks")

    xt = Tensor(data, requires_grad=True, dtype=data.dtype)
    y = f(xt)
    if y.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    backward(y)
    analytic = xt.grad.copy() if xt.grad is not None else np.zeros_like(data)

    numeric = np.zeros_like(data)
    flat = data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(data, dtype=data.dtype)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(data, dtype=data.dtype)).data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
