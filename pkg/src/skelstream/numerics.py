"""Dense float64 math kernels with hand-derived backward passes.

Every forward op is a pure function of its inputs. Ops that participate in
training come in ``*_forward`` / ``*_backward`` pairs: the forward returns
``(output, cache)`` and the backward consumes that cache plus the upstream
gradient, so unrolled sequences can keep as many caches alive as they need.
``finite_diff_grad`` is the independent gradient oracle and deliberately never
touches any backward code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DimensionError, OracleError

Array = np.ndarray


def as_tensor(data, shape: Sequence[int] | None = None) -> Array:
    """Coerce to a float64 ndarray, optionally reshaping."""
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(tuple(shape))
    return arr


@dataclass
class Parameter:
    """A trainable tensor paired with its gradient accumulator.

    ``decay`` marks whether weight decay applies (off for norm affine terms
    and feedback gates).
    """

    value: Array
    grad: Array = None  # type: ignore[assignment]
    trainable: bool = True
    decay: bool = True

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.asarray(self.grad, dtype=np.float64)
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def _value(p) -> Array:
    return p.value if isinstance(p, Parameter) else np.asarray(p, dtype=np.float64)


# ---------------------------------------------------------------------------
# 2-D cross-correlation (deep-learning "convolution", no kernel flip)
# ---------------------------------------------------------------------------


@dataclass
class Conv2dCache:
    x_shape: tuple
    padded_shape: tuple
    cols: Array
    weight: Array
    stride: tuple
    padding: tuple
    out_hw: tuple


def _im2col(padded: Array, kh: int, kw: int, sh: int, sw: int) -> tuple[Array, tuple]:
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    windows = windows[:, ::sh, ::sw]
    c, h_out, w_out = windows.shape[0], windows.shape[1], windows.shape[2]
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, h_out * w_out)
    return np.ascontiguousarray(cols), (h_out, w_out)


def conv2d_forward(
    x: Array,
    weight,
    stride: tuple[int, int] = (1, 1),
    padding: tuple[int, int] = (0, 0),
) -> tuple[Array, Conv2dCache]:
    """Cross-correlate ``x`` (C_in, H, W) with ``weight`` (C_out, C_in, kH, kW)."""
    w = _value(weight)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or w.ndim != 4:
        raise DimensionError(f"conv2d expects rank-3 input and rank-4 weight, got {x.shape} / {w.shape}")
    c_in, h, wid = x.shape
    c_out, wc_in, kh, kw = w.shape
    if wc_in != c_in:
        raise DimensionError(f"input has {c_in} channels but weight expects {wc_in}")
    sh, sw = stride
    ph, pw = padding
    if sh < 1 or sw < 1:
        raise ConfigError(f"stride components must be >= 1, got {stride}")
    if ph < 0 or pw < 0:
        raise ConfigError(f"padding components must be >= 0, got {padding}")
    if h + 2 * ph < kh or wid + 2 * pw < kw:
        raise DimensionError(
            f"kernel ({kh}x{kw}) does not fit padded input ({h + 2 * ph}x{wid + 2 * pw})"
        )
    padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    cols, (h_out, w_out) = _im2col(padded, kh, kw, sh, sw)
    y = (w.reshape(c_out, -1) @ cols).reshape(c_out, h_out, w_out)
    cache = Conv2dCache(x.shape, padded.shape, cols, w, (sh, sw), (ph, pw), (h_out, w_out))
    return y, cache


def conv2d(x: Array, weight, stride=(1, 1), padding=(0, 0)) -> Array:
    y, _ = conv2d_forward(x, weight, stride, padding)
    return y


def conv2d_backward(cache: Conv2dCache, grad_out: Array) -> tuple[Array, Array]:
    """Return (grad_input, grad_weight) for a cached conv2d_forward."""
    c_out, _, kh, kw = cache.weight.shape
    h_out, w_out = cache.out_hw
    g = np.asarray(grad_out, dtype=np.float64).reshape(c_out, h_out * w_out)
    grad_w = (g @ cache.cols.T).reshape(cache.weight.shape)
    grad_cols = cache.weight.reshape(c_out, -1).T @ g
    c_in = cache.x_shape[0]
    grad_cols = grad_cols.reshape(c_in, kh, kw, h_out, w_out)
    sh, sw = cache.stride
    ph, pw = cache.padding
    grad_padded = np.zeros(cache.padded_shape)
    for i in range(kh):
        for j in range(kw):
            grad_padded[:, i : i + sh * h_out : sh, j : j + sw * w_out : sw] += grad_cols[:, i, j]
    h, wid = cache.x_shape[1], cache.x_shape[2]
    grad_x = grad_padded[:, ph : ph + h, pw : pw + wid]
    return np.ascontiguousarray(grad_x), grad_w


# ---------------------------------------------------------------------------
# Pointwise nonlinearities
# ---------------------------------------------------------------------------


def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def relu_backward(x: Array, grad_out: Array) -> Array:
    return grad_out * (x > 0.0)


def sigmoid(x: Array) -> Array:
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: Array, grad_out: Array) -> Array:
    """Backward given the forward *output* y = sigmoid(x)."""
    return grad_out * y * (1.0 - y)


def softmax(x: Array, axis: int = -1) -> Array:
    """Max-subtracted softmax along ``axis``."""
    x = np.asarray(x, dtype=np.float64)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(y: Array, grad_out: Array, axis: int = -1) -> Array:
    """Backward given the forward output ``y = softmax(x, axis)``."""
    inner = np.sum(grad_out * y, axis=axis, keepdims=True)
    return y * (grad_out - inner)


# ---------------------------------------------------------------------------
# Global average pooling over the trailing (T, V) slab
# ---------------------------------------------------------------------------


def global_avg_pool(x: Array) -> Array:
    """Mean over all axes after the channel axis: (C, T, V) -> (C,)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x[0].size == 0:
        raise DimensionError(f"global_avg_pool needs a non-empty slab per channel, got shape {x.shape}")
    return x.reshape(x.shape[0], -1).mean(axis=1)


def global_avg_pool_backward(x_shape: tuple, grad_out: Array) -> Array:
    slab = int(np.prod(x_shape[1:]))
    g = np.asarray(grad_out, dtype=np.float64).reshape((x_shape[0],) + (1,) * (len(x_shape) - 1))
    return np.broadcast_to(g / slab, x_shape).copy()


# ---------------------------------------------------------------------------
# Batch normalization over the channel axis
# ---------------------------------------------------------------------------


@dataclass
class RunningStats:
    mean: Array
    var: Array

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))


@dataclass
class BatchNormCache:
    x: Array
    xhat: Array
    gamma: Array
    inv_std: Array
    mu: Array
    axes: tuple
    count: int
    training: bool


def _bn_broadcast(v: Array, ndim: int) -> Array:
    return v.reshape((v.shape[0],) + (1,) * (ndim - 1))


def batchnorm_forward(
    x: Array,
    gamma,
    beta,
    stats: RunningStats,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> tuple[Array, BatchNormCache]:
    """Normalize each channel of ``x`` (C, ...) over all remaining axes.

    Train mode uses batch statistics (population variance) and folds them into
    the running stats by exponential moving average; eval mode reads the
    running stats. A single-element slab in train mode has zero variance and
    degenerates to the eps floor: the normalized value is 0 and the output is
    beta. Output is ``gamma * xhat + beta``.
    """
    if eps <= 0.0:
        raise ConfigError(f"batchnorm eps must be positive, got {eps}")
    g = _value(gamma)
    b = _value(beta)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != g.shape[0] or x.shape[0] != b.shape[0]:
        raise DimensionError(
            f"channel axis {x.shape[0]} does not match affine length {g.shape[0]}/{b.shape[0]}"
        )
    axes = tuple(range(1, x.ndim))
    count = int(np.prod(x.shape[1:])) if x.ndim > 1 else 1
    if training:
        mu = x.mean(axis=axes) if axes else x.copy()
        var = x.var(axis=axes) if axes else np.zeros_like(x)
        stats.mean = (1.0 - momentum) * stats.mean + momentum * mu
        stats.var = (1.0 - momentum) * stats.var + momentum * var
    else:
        mu = stats.mean
        var = stats.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bn_broadcast(mu, x.ndim)) * _bn_broadcast(inv_std, x.ndim)
    y = _bn_broadcast(g, x.ndim) * xhat + _bn_broadcast(b, x.ndim)
    cache = BatchNormCache(x, xhat, g, inv_std, mu, axes, count, training)
    return y, cache


def batchnorm_backward(cache: BatchNormCache, grad_out: Array) -> tuple[Array, Array, Array]:
    """Return (grad_x, grad_gamma, grad_beta)."""
    gy = np.asarray(grad_out, dtype=np.float64)
    axes = cache.axes
    grad_gamma = np.sum(gy * cache.xhat, axis=axes)
    grad_beta = np.sum(gy, axis=axes)
    gxhat = gy * _bn_broadcast(cache.gamma, gy.ndim)
    inv = _bn_broadcast(cache.inv_std, gy.ndim)
    if not cache.training:
        return gxhat * inv, grad_gamma, grad_beta
    n = cache.count
    sum_gxhat = np.sum(gxhat, axis=axes, keepdims=True)
    sum_gxhat_xhat = np.sum(gxhat * cache.xhat, axis=axes, keepdims=True)
    grad_x = (inv / n) * (n * gxhat - sum_gxhat - cache.xhat * sum_gxhat_xhat)
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Independent gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[Array], float], x: Array, h: float = 1e-5) -> Array:
    """Central-difference gradient of a scalar function, element by element.

    This is the verification oracle: it only ever calls ``f`` and shares no
    code with any backward pass.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xp[i] += h
        fp = float(f(xp.reshape(x.shape)))
        xm = x.copy().reshape(-1)
        xm[i] -= h
        fm = float(f(xm.reshape(x.shape)))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite function value near element {i}")
        flat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: Array, b: Array) -> float:
    """Max-norm relative deviation between two arrays of equal shape."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-12)
    return float(np.max(np.abs(a - b), initial=0.0) / denom)
