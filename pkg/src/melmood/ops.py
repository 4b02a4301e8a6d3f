"""Differentiable ops over Tensor. NCHW layout throughout.

Convolution is cross-correlation (no kernel flip). Subgradients at ReLU and
ReLU6 kinks are 0; maxpool routes its gradient to the first (row-major)
maximal element of each window so backward is deterministic.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make_result


def _check_4d(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ValueError("%s expects NCHW input, got %d dims" % (op, x.data.ndim))


def _pad_spatial(a: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return a
    return np.pad(
        a,
        ((0, 0), (0, 0), (padding, padding), (padding, padding)),
        mode="constant",
        constant_values=value,
    )


def _windows(a: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided view (N, C, OH, OW, kh, kw) of all kernel placements."""
    w = sliding_window_view(a, (kh, kw), axis=(2, 3))
    return w[:, :, ::stride, ::stride]


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple:
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    return oh, ow


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Batched cross-correlation: weight (Oc, C, Kh, Kw) applied to x (N, C, H, W)."""
    _check_4d(x, "conv2d")
    n, c, h, w = x.data.shape
    oc, ic, kh, kw = weight.data.shape
    if ic != c:
        raise ValueError("conv2d channel mismatch: input has %d, weight expects %d" % (c, ic))
    oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ValueError("conv2d kernel %dx%d does not fit %dx%d input with padding %d" % (kh, kw, h, w, padding))

    xp = _pad_spatial(x.data, padding)
    win = _windows(xp, kh, kw, stride)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(oc, c * kh * kw)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        g_rows = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, oc)
        dw = (g_rows.T @ cols).reshape(weight.data.shape)
        dcols = (g_rows @ wmat).reshape(n, oh, ow, c, kh, kw)
        dxp = np.zeros_like(xp)
        sh = stride
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * oh : sh, j : j + sh * ow : sh] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp if padding == 0 else dxp[:, :, padding : padding + h, padding : padding + w]
        if bias is None:
            return dx, dw
        return dx, dw, g_rows.sum(axis=0)

    return make_result(out, parents, backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution: one (Kh, Kw) filter per input channel."""
    _check_4d(x, "depthwise_conv2d")
    n, c, h, w = x.data.shape
    if weight.data.ndim != 3 or weight.data.shape[0] != c:
        raise ValueError(
            "depthwise_conv2d expects weight (C, Kh, Kw) with C=%d, got %r" % (c, weight.data.shape)
        )
    kh, kw = weight.data.shape[1:]
    oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
    if oh <= 0 or ow <= 0:
        raise ValueError("depthwise kernel does not fit input")

    xp = _pad_spatial(x.data, padding)
    win = _windows(xp, kh, kw, stride)
    out = np.einsum("nchwij,cij->nchw", win, weight.data, optimize=True)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        dw = np.einsum("nchw,nchwij->cij", g, win, optimize=True)
        dxp = np.zeros_like(xp)
        sh = stride
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * oh : sh, j : j + sh * ow : sh] += g * weight.data[None, :, i, j, None, None]
        dx = dxp if padding == 0 else dxp[:, :, padding : padding + h, padding : padding + w]
        return dx, dw

    return make_result(out, (x, weight), backward)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2, padding: int = 0) -> Tensor:
    """Windowed maximum. Padded cells are -inf and never win the argmax."""
    _check_4d(x, "maxpool2d")
    n, c, h, w = x.data.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError("maxpool2d window %d larger than %dx%d input" % (k, h, w))
    oh, ow = conv_output_hw(h, w, k, k, stride, padding)

    xp = _pad_spatial(x.data, padding, value=-np.inf)
    win = _windows(xp, k, k, stride).reshape(n, c, oh, ow, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        dxp = np.zeros_like(xp)
        ni, ci, ohi, owi = np.indices((n, c, oh, ow), sparse=False)
        hi = ohi * stride + arg // k
        wi = owi * stride + arg % k
        np.add.at(dxp, (ni, ci, hi, wi), g)
        dx = dxp if padding == 0 else dxp[:, :, padding : padding + h, padding : padding + w]
        return (dx,)

    return make_result(out, (x,), backward)


def global_avgpool(x: Tensor) -> Tensor:
    """Spatial mean per channel, (N, C, H, W) -> (N, C)."""
    _check_4d(x, "global_avgpool")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        scale = np.asarray(1.0 / (h * w), dtype=x.data.dtype)
        return (np.broadcast_to((g * scale)[:, :, None, None], x.data.shape).copy(),)

    return make_result(out, (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map x (N, F) @ weight (Out, F)^T + bias."""
    if x.data.ndim != 2:
        raise ValueError("linear expects (N, F) input, got %r" % (x.data.shape,))
    if x.data.shape[1] != weight.data.shape[1]:
        raise ValueError(
            "linear feature mismatch: input %d vs weight %d" % (x.data.shape[1], weight.data.shape[1])
        )
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        dx = g @ weight.data
        dw = g.T @ x.data
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    return make_result(out, parents, backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalization.

    Training mode normalizes by biased batch statistics over (N, H, W) and
    updates running stats in place; eval mode uses the running stats as
    constants. Batch size 1 in training mode is rejected.
    """
    _check_4d(x, "batchnorm2d")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError("batchnorm2d parameter length must equal channel count %d" % c)

    if training:
        if n == 1:
            raise ValueError("batchnorm2d training mode needs batch size >= 2")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.data.dtype, copy=False)
        var = running_var.astype(x.data.dtype, copy=False)

    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            m = n * h * w
            dx = (
                inv[None, :, None, None]
                / m
                * (
                    m * dxhat
                    - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                    - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                )
            )
        else:
            dx = dxhat * inv[None, :, None, None]
        return dx, dgamma, dbeta

    return make_result(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g * mask,)

    return make_result(out, (x,), backward)


def relu6(x: Tensor) -> Tensor:
    six = x.data.dtype.type(6)
    out = np.clip(x.data, 0, six)
    mask = (x.data > 0) & (x.data < six)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g * mask,)

    return make_result(out, (x,), backward)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1), got %r" % p)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode requires a generator")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    scale = x.data.dtype.type(1.0 / (1.0 - p))
    out = x.data * keep * scale

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g * keep * scale,)

    return make_result(out, (x,), backward)


def channel_concat(xs: Sequence[Tensor]) -> Tensor:
    """Stack channels in argument order; batch and spatial dims must agree."""
    if len(xs) == 0:
        raise ValueError("channel_concat needs at least one input")
    first = xs[0].data.shape
    for t in xs[1:]:
        s = t.data.shape
        if s[0] != first[0] or s[2:] != first[2:]:
            raise ValueError("channel_concat spatial/batch mismatch: %r vs %r" % (first, s))
    out = np.concatenate([t.data for t in xs], axis=1)
    sizes = [t.data.shape[1] for t in xs]

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grads = []
        start = 0
        for sz in sizes:
            grads.append(g[:, start : start + sz])
            start += sz
        return grads

    return make_result(out, tuple(xs), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError("add shape mismatch: %r vs %r" % (a.data.shape, b.data.shape))
    out = a.data + b.data

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return g, g

    return make_result(out, (a, b), backward)


def flatten(x: Tensor) -> Tensor:
    n = x.data.shape[0]
    out = x.data.reshape(n, -1)
    shape = x.data.shape

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (g.reshape(shape),)

    return make_result(out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype),)

    return make_result(out, (x,), backward)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise exp-normalize with max subtraction; rows sum to 1."""
    if logits.data.ndim != 2:
        raise ValueError("softmax expects (N, K) logits")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        inner = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - inner),)

    return make_result(s, (logits,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[target], fused through log-sum-exp."""
    if logits.data.ndim != 2:
        raise ValueError("cross_entropy expects (N, K) logits")
    t = np.asarray(targets)
    n, k = logits.data.shape
    if t.shape != (n,):
        raise ValueError("cross_entropy targets must have shape (%d,), got %r" % (n, t.shape))
    if t.min() < 0 or t.max() >= k:
        raise ValueError("cross_entropy target index out of range [0, %d)" % k)

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    losses = lse - z[np.arange(n), t]
    out = np.asarray(losses.mean(), dtype=logits.data.dtype)

    def backward(g: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        p = np.exp(z - lse[:, None])
        p[np.arange(n), t] -= 1.0
        return (p * (g / n),)

    return make_result(out, (logits,), backward)
