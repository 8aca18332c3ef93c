"""Differentiable operators.

Each function computes its forward value with numpy and registers a
closure that maps the output gradient to input gradients.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, DataError, DimensionError, ParameterError
from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(out, (a, b),
                       lambda g: (_unbroadcast(g / bd, ad.shape),
                                  _unbroadcast(-g * out / bd, bd.shape)))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    p = float(exponent)
    return make_result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    # np.maximum keeps NaN, so corrupted inputs surface in the loss
    return make_result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


# ----------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_result(ad @ bd, (a, b), back)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[ax] for ax in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    items = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(x.data[index]), (x,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


# ------------------------------------------------------------ network layers

def linear(x, w, b=None) -> Tensor:
    """``y[..., j] = sum_k w[j, k] x[..., k] + b[j]``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"linear: bias shape {b.shape} incompatible with weight shape {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return make_result(out, inputs, back)


def conv2d(x, k, bias=None, padding=0) -> Tensor:
    """Stride-1 cross-correlation with zero padding over the last two axes."""
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {k.shape}")
    B, cin, H, W = x.shape
    cout, kcin, kh, kw = k.shape
    ph, pw = _pair(padding)
    if kcin != cin:
        raise DimensionError(f"conv2d: input channels {cin} (input {x.shape}) != kernel channels {kcin} (kernel {k.shape})")
    if ph < 0 or pw < 0:
        raise ParameterError(f"conv2d: padding must be >= 0, got {(ph, pw)}")
    if kh > H + 2 * ph or kw > W + 2 * pw:
        raise DimensionError(f"conv2d: kernel {k.shape} larger than padded input {x.shape} with padding {(ph, pw)}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    Ho, Wo = H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B, cin, Ho, Wo, kh, kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, cin * kh * kw)
    kd = k.data
    out = (cols @ kd.reshape(cout, -1).T).reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]

    def back(g):
        gk = (g.transpose(1, 0, 2, 3).reshape(cout, -1) @ cols).reshape(kd.shape)
        gx = None
        if x.requires_grad:
            # full correlation with the flipped kernel gives d/d(padded input)
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gcols = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            kflip = kd[:, :, ::-1, ::-1]
            gxp = np.tensordot(gcols, kflip, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum(axis=(0, 2, 3))

    inputs = (x, k) if bias is None else (x, k, bias)
    return make_result(np.ascontiguousarray(out), inputs, back)


def conv1d(x, k, bias=None, padding=0) -> Tensor:
    """Stride-1 cross-correlation over the last axis of a (B, C, T) input."""
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 3 or k.ndim != 3:
        raise DimensionError(f"conv1d expects 3-D input and kernel, got {x.shape} and {k.shape}")
    B, cin, T = x.shape
    cout, kcin, kt = k.shape
    if kt > T + 2 * int(padding):
        raise DimensionError(f"conv1d: kernel {k.shape} larger than padded input {x.shape} with padding {padding}")
    y = conv2d(reshape(x, (B, cin, 1, T)), reshape(k, (cout, kcin, 1, kt)), bias, (0, int(padding)))
    return reshape(y, (B, cout, y.shape[-1]))


def maxpool2d(x, kernel, stride=None) -> Tensor:
    """Max over sliding windows on the last two axes.

    The gradient goes to the first maximum in row-major window order,
    which is the lowest flat index among tied elements.
    """
    x = as_tensor(x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    if min(kh, kw, sh, sw) <= 0:
        raise ParameterError(f"maxpool: kernel {(kh, kw)} and stride {(sh, sw)} must be positive")
    if x.ndim < 2:
        raise DimensionError(f"maxpool2d needs rank >= 2 input, got {x.shape}")
    H, W = x.shape[-2:]
    if kh > H or kw > W:
        raise DimensionError(f"maxpool: window {(kh, kw)} does not fit input {x.shape}")
    lead = x.shape[:-2]
    xd = x.data.reshape(-1, H, W)
    win = sliding_window_view(xd, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    L, Ho, Wo = win.shape[:3]
    flat = win.reshape(L, Ho, Wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    rows = np.arange(Ho)[:, None] * sh + arg // kw
    cols = np.arange(Wo)[None, :] * sw + arg % kw
    src = (np.arange(L)[:, None, None] * (H * W) + rows * W + cols).ravel()
    size = x.size

    def back(g):
        gx = np.bincount(src, weights=g.ravel(), minlength=size)
        return (gx.reshape(lead + (H, W)),)

    return make_result(out.reshape(lead + (Ho, Wo)), (x,), back)


def maxpool1d(x, kernel: int, stride: int | None = None) -> Tensor:
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    lead, T = x.shape[:-1], x.shape[-1]
    y = maxpool2d(reshape(x, lead + (1, T)), (1, kernel), (1, stride))
    return reshape(y, lead + (y.shape[-1],))


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization with channels on axis 1.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance); otherwise the buffers are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    gd = gamma.data.reshape(bshape)
    if training:
        m = x.size // C
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(C)
        unbiased = var.reshape(C) * (m / (m - 1) if m > 1 else 1.0)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.reshape(bshape)
        var = running_var.reshape(bshape)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gd * xhat + beta.data.reshape(bshape)

    def back(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            m = x.size // C
            gx = inv / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = dxhat * inv
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), back)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learned scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if n < 1:
        raise DimensionError("layer_norm: normalized axis is empty")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        gx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), back)


def dropout(x, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the identity outside training mode."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), back)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (B, K) logits, got {logits.shape}")
    B, K = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise DimensionError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {B} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise DataError(f"cross_entropy: labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return make_result(np.asarray(loss), (logits,), back)


def multi_head_attention(x, wq, bq, wk, bk, wv, bv, wo, bo, heads: int,
                         need_weights: bool = False):
    """Self-attention over axis 0 of a (S, B, D) sequence.

    Returns the attended sequence, and the (B, heads, S, S) weight array
    when ``need_weights`` is set.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"attention expects (S, B, D) input, got {x.shape}")
    S, B, D = x.shape
    if heads < 1 or D % heads:
        raise ConfigurationError(f"model dimension {D} is not divisible by {heads} heads")
    dh = D // heads

    def split(t):
        return transpose(reshape(t, (S, B, heads, dh)), (1, 2, 0, 3))  # B, H, S, dh

    q = split(linear(x, wq, bq))
    k = split(linear(x, wk, bk))
    v = split(linear(x, wv, bv))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)  # B, H, S, dh
    ctx = reshape(transpose(ctx, (2, 0, 1, 3)), (S, B, D))
    out = linear(ctx, wo, bo)
    if need_weights:
        return out, attn.data
    return out
