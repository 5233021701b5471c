"""Differentiable primitives.

Every op computes its forward result with numpy, records its multiply-add
count on the active :class:`~pale.trace.FlopTrace`, and returns a
:class:`~pale.tensor.Tensor` carrying the analytic backward pass.  There is no
general broadcasting: operands must agree in shape except where an op says
otherwise (bias vectors, masks).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from .tensor import Tensor, make
from .trace import record


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


# --------------------------------------------------------------------------
# elementwise and structural


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"add: shape mismatch {a.shape} vs {b.shape}")
    return make(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"mul: shape mismatch {a.shape} vs {b.shape}")
    return make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor) -> Tensor:
    """Multiply by a constant scalar or a constant array broadcastable to ``x``."""
    f = np.asarray(factor, dtype=x.dtype)
    return make(x.data * f, (x,), lambda g: (g * f,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    _check(bias.ndim == 1 and bias.shape[0] == x.shape[-1], "add_bias: bias must match last axis")
    axes = tuple(range(x.ndim - 1))
    return make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes)))


def sum_all(x: Tensor) -> Tensor:
    return make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


# --------------------------------------------------------------------------
# products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (..., k, n)`` with identical leading dims, or ``(..., m, k) @ (k, n)``."""
    _check(a.ndim >= 2 and b.ndim >= 2, "matmul: operands must be at least 2-d")
    _check(a.shape[-1] == b.shape[-2], f"matmul: inner extents differ {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    _check(shared or a.shape[:-2] == b.shape[:-2], f"matmul: batch extents differ {a.shape} @ {b.shape}")
    m, k = a.shape[-2:]
    n = b.shape[-1]
    batch = math.prod(a.shape[:-2])
    out = a.data @ b.data
    record("matmul", batch * m * n * k)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return make(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Apply a ``(c_in, c_out)`` weight over the last axis."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        y = add_bias(y, bias)
    return reshape(y, lead + (weight.shape[1],))


# --------------------------------------------------------------------------
# normalisation and activations


def softmax_lastdim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get
    exactly zero probability.  A slice with no True entry is rejected.
    """
    _check(x.shape[-1] >= 1, "softmax: empty last axis")
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        _check(bool(mask.any(axis=-1).all()), "softmax: fully masked row")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    record("softmax", p.size)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make(p, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    _check(c > 0, "layer_norm: zero channels")
    _check(gamma.shape == (c,) and beta.shape == (c,), "layer_norm: affine shape mismatch")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    record("norm", x.data.size)
    axes = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    record("act", x.data.size)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return make((x.data * cdf).astype(x.dtype, copy=False), (x,), backward)


# --------------------------------------------------------------------------
# convolution


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int | tuple[int, int] = 1,
    pad: int | tuple[int, int] = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-d convolution on ``(b, h, w, c)`` input.

    ``weight`` is ``(kh, kw, c_in // groups, c_out)``; output channel ``o``
    belongs to group ``o // (c_out // groups)``.
    """
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (pad, pad) if isinstance(pad, int) else pad
    _check(x.ndim == 4, "conv2d: input must be (b, h, w, c)")
    b, h, w, cin = x.shape
    kh, kw, cpg, cout = weight.shape
    _check(groups >= 1 and cin % groups == 0 and cout % groups == 0, "conv2d: channels not divisible by groups")
    _check(cpg == cin // groups, f"conv2d: weight expects {cpg * groups} input channels, got {cin}")
    _check(kh <= h + 2 * ph and kw <= w + 2 * pw, "conv2d: kernel larger than padded input")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    opg = cout // groups
    depthwise = cpg == 1 and opg == 1

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else x.data
    W = weight.data

    def window(arr, i, j):
        return arr[:, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw, :]

    out = np.zeros((b, oh, ow, cout), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = window(xp, i, j)
            if depthwise:
                out += xs * W[i, j, 0]
            elif groups == 1:
                out += xs @ W[i, j]
            else:
                xs_g = xs.reshape(b, oh, ow, groups, cpg)
                w_g = W[i, j].reshape(cpg, groups, opg)
                out += np.einsum("bhwgc,cgo->bhwgo", xs_g, w_g).reshape(b, oh, ow, cout)
    if bias is not None:
        _check(bias.shape == (cout,), "conv2d: bias shape mismatch")
        out += bias.data
    record("conv", b * oh * ow * kh * kw * cpg * cout)

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(W)
        for i in range(kh):
            for j in range(kw):
                xs = window(xp, i, j)
                gslot = window(gxp, i, j)
                if depthwise:
                    gw[i, j, 0] = (g * xs).sum(axis=(0, 1, 2))
                    gslot += g * W[i, j, 0]
                elif groups == 1:
                    gw[i, j] = xs.reshape(-1, cin).T @ g.reshape(-1, cout)
                    gslot += g @ W[i, j].T
                else:
                    xs_g = xs.reshape(b, oh, ow, groups, cpg)
                    g_g = g.reshape(b, oh, ow, groups, opg)
                    w_g = W[i, j].reshape(cpg, groups, opg)
                    gw[i, j] = np.einsum("bhwgc,bhwgo->cgo", xs_g, g_g).reshape(cpg, cout)
                    gslot += np.einsum("bhwgo,cgo->bhwgc", g_g, w_g).reshape(b, oh, ow, cin)
        gx = gxp[:, ph : ph + h, pw : pw + w, :]
        gb = g.sum(axis=(0, 1, 2)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make(out, parents, backward)


# --------------------------------------------------------------------------
# pooling, channel split / concat, spatial pad / crop


def mean_pool_spatial(x: Tensor) -> Tensor:
    _check(x.ndim == 4, "mean_pool_spatial: input must be (b, h, w, c)")
    b, h, w, c = x.shape
    n = h * w
    return make(x.data.mean(axis=(1, 2), keepdims=True), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    lead = parts[0].shape[:-1]
    _check(all(p.shape[:-1] == lead for p in parts), "concat_channels: leading extents differ")
    edges = np.cumsum([0] + [p.shape[-1] for p in parts])

    def backward(g):
        return tuple(g[..., edges[i] : edges[i + 1]] for i in range(len(parts)))

    return make(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return make(np.ascontiguousarray(x.data[..., start:stop]), (x,), backward)


def split_channels(x: Tensor, parts: int = 2) -> list[Tensor]:
    c = x.shape[-1]
    _check(parts >= 1 and c % parts == 0, f"split_channels: {c} channels not divisible into {parts}")
    step = c // parts
    return [slice_channels(x, k * step, (k + 1) * step) for k in range(parts)]


def pad_spatial(x: Tensor, bottom: int, right: int) -> Tensor:
    """Zero-pad ``(b, h, w, c)`` on the bottom and right edges."""
    if bottom == 0 and right == 0:
        return x
    h, w = x.shape[1:3]
    out = np.pad(x.data, ((0, 0), (0, bottom), (0, right), (0, 0)))
    return make(out, (x,), lambda g: (np.ascontiguousarray(g[:, :h, :w, :]),))


def crop_spatial(x: Tensor, h: int, w: int) -> Tensor:
    if x.shape[1] == h and x.shape[2] == w:
        return x
    hp, wp = x.shape[1:3]

    def backward(g):
        return (np.pad(g, ((0, 0), (0, hp - h), (0, wp - w), (0, 0))),)

    return make(np.ascontiguousarray(x.data[:, :h, :w, :]), (x,), backward)


# --------------------------------------------------------------------------
# token gather / scatter


def take_tokens(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``(b, T, c)`` tokens into ``(b, *index.shape, c)``."""
    index = np.asarray(index, dtype=np.intp)
    _check(x.ndim == 3, "take_tokens: input must be (b, T, c)")
    T = x.shape[1]
    _check(index.size == 0 or (index.min() >= 0 and index.max() < T), "take_tokens: index out of range")
    flat = index.ravel()
    out = x.data[:, flat, :].reshape((x.shape[0],) + index.shape + (x.shape[2],))

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), flat), g.reshape(x.shape[0], flat.size, x.shape[2]))
        return (gx,)

    return make(out, (x,), backward)


def scatter_tokens(y: Tensor, index: np.ndarray, num_tokens: int) -> Tensor:
    """Inverse of :func:`take_tokens`; tokens listed more than once are summed."""
    index = np.asarray(index, dtype=np.intp)
    b, c = y.shape[0], y.shape[-1]
    _check(y.shape[1:-1] == index.shape, "scatter_tokens: index shape mismatch")
    _check(index.size == 0 or (index.min() >= 0 and index.max() < num_tokens), "scatter_tokens: index out of range")
    flat = index.ravel()
    out = np.zeros((b, num_tokens, c), dtype=y.dtype)
    np.add.at(out, (slice(None), flat), y.data.reshape(b, flat.size, c))
    return make(out, (y,), lambda g: (g[:, flat, :].reshape(y.shape),))


# --------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``(b, k)`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.intp)
    _check(logits.ndim == 2 and labels.shape == (logits.shape[0],), "cross_entropy: shape mismatch")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / labels.size),)

    return make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
