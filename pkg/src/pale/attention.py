"""Pale-shaped self-attention and the ablation baselines it is compared with.

All modes share one parameter layout: three separable projections (3x3
depthwise then 1x1 pointwise, over the full channel width) produce Q, K, V,
and a 1x1 linear layer projects the attended features.  The modes differ
only in how tokens are grouped before multi-head attention:

``global``           every token attends to every token
``axial``            parallel split with single-row / single-column groups
``cross_shaped``     parallel split with contiguous row / column stripes
``pale_parallel``    half the channels attend within interlaced row groups,
                     the other half within interlaced column groups
``pale_sequential``  all channels use row groups on even blocks and column
                     groups on odd blocks
``pale_vanilla``     all channels attend within the whole pale (row group g
                     together with column group g)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from . import ops
from .init import trunc_normal, zeros
from .partition import (
    IndexGroups,
    PartitionSpec,
    build_groups,
    pad_to_divisible,
    pale_token_index,
    unpad,
)
from .tensor import Tensor
from .trace import flop_scope

MODES = ("global", "axial", "cross_shaped", "pale_vanilla", "pale_sequential", "pale_parallel")
SPLIT_MODES = ("axial", "cross_shaped", "pale_parallel")


@dataclass
class SeparableProjection:
    """3x3 depthwise conv (optional) followed by a pointwise ``c x c`` layer."""

    depthwise: Tensor | None  # (3, 3, 1, c)
    pointwise: Tensor  # (c, c)
    bias: Tensor | None  # (c,)

    def __call__(self, x: Tensor) -> Tensor:
        if self.depthwise is not None:
            x = ops.conv2d(x, self.depthwise, None, stride=1, pad=1, groups=x.shape[-1])
        return ops.linear(x, self.pointwise, self.bias)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        if self.depthwise is not None:
            yield "dw.weight", self.depthwise
        yield "pw.weight", self.pointwise
        if self.bias is not None:
            yield "pw.bias", self.bias


@dataclass
class AttentionParams:
    q: SeparableProjection
    k: SeparableProjection
    v: SeparableProjection
    proj: Tensor  # (c, c)
    proj_bias: Tensor | None
    heads: int

    @property
    def channels(self) -> int:
        return self.proj.shape[0]

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    def __post_init__(self):
        c = self.channels
        if self.heads < 1 or c % self.heads:
            raise ValueError(f"{self.heads} heads do not divide {c} channels")
        for p in (self.q, self.k, self.v):
            if p.pointwise.shape != (c, c):
                raise ValueError("QKV pointwise weights must be c x c")
            if p.depthwise is not None and p.depthwise.shape != (3, 3, 1, c):
                raise ValueError("QKV depthwise weights must be 3 x 3 x 1 x c")

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for tag, p in (("q", self.q), ("k", self.k), ("v", self.v)):
            for name, t in p.named():
                yield f"{tag}.{name}", t
        yield "proj.weight", self.proj
        if self.proj_bias is not None:
            yield "proj.bias", self.proj_bias

    @classmethod
    def init(
        cls,
        channels: int,
        heads: int,
        rng: np.random.Generator,
        dtype=np.float32,
        std: float = 0.02,
        separable: bool = True,
        bias: bool = True,
    ) -> "AttentionParams":
        """Random parameters; ``separable=False`` gives plain linear QKV (ViT style)."""

        def phi():
            dw = trunc_normal(rng, (3, 3, 1, channels), std, dtype) if separable else None
            pw = trunc_normal(rng, (channels, channels), std, dtype)
            return SeparableProjection(dw, pw, zeros((channels,), dtype) if bias else None)

        q, k, v = phi(), phi(), phi()
        proj = trunc_normal(rng, (channels, channels), std, dtype)
        return cls(q, k, v, proj, zeros((channels,), dtype) if bias else None, heads)


def qkv_separable(x: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    if x.ndim != 4 or x.shape[-1] != params.channels:
        raise ValueError(f"expected (b, h, w, {params.channels}) input, got {x.shape}")
    return params.q(x), params.k(x), params.v(x)


def msa_group(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head attention inside each group.

    ``q, k, v`` are ``(b, G, n, d)``; ``mask`` is a ``(G, n)`` key-validity
    array (True = may be attended to).
    """
    b, G, n, d = q.shape
    if k.shape != q.shape or v.shape != q.shape:
        raise ValueError("q, k, v shapes differ")
    if heads < 1 or d % heads:
        raise ValueError(f"{heads} heads do not divide width {d}")
    dh = d // heads

    def split_heads(t):
        return ops.transpose(ops.reshape(t, (b, G, n, heads, dh)), (0, 1, 3, 2, 4))

    qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
    scores = ops.scale(ops.matmul(qh, ops.transpose(kh, (0, 1, 2, 4, 3))), 1.0 / math.sqrt(dh))
    key_mask = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (G, n):
            raise ValueError(f"mask shape {mask.shape} != {(G, n)}")
        if not mask.any(axis=1).all():
            raise ValueError("a group has no valid key")
        key_mask = mask[None, :, None, None, :]
    attn = ops.softmax_lastdim(scores, key_mask)
    out = ops.matmul(attn, vh)
    return ops.reshape(ops.transpose(out, (0, 1, 3, 2, 4)), (b, G, n, d))


def _grouped(q, k, v, token_index: np.ndarray, heads: int, valid: np.ndarray | None) -> Tensor:
    """Gather -> attend -> scatter over an explicit ``(G, n)`` token index."""
    b, h, w, d = q.shape

    def gather(t):
        return ops.take_tokens(ops.reshape(t, (b, h * w, d)), token_index)

    mask = None
    if valid is not None and not valid.all():
        mask = valid.reshape(-1)[token_index]
    y = msa_group(gather(q), gather(k), gather(v), heads, mask)
    return ops.reshape(ops.scatter_tokens(y, token_index, h * w), (b, h, w, d))


def _branch(q, k, v, groups: IndexGroups, heads, valid):
    return _grouped(q, k, v, groups.token_index(), heads, valid)


def _project(y: Tensor, params: AttentionParams) -> Tensor:
    with flop_scope("proj"):
        return ops.linear(y, params.proj, params.proj_bias)


def ps_attention_parallel(
    x: Tensor, spec: PartitionSpec, params: AttentionParams, mask_padding: bool = True
) -> Tensor:
    """Channel-split row/column attention, concatenated and projected."""
    c = x.shape[-1]
    if c % 2:
        raise ValueError(f"parallel attention needs an even channel count, got {c}")
    if params.heads < 2 or params.heads % 2:
        raise ValueError(f"parallel attention needs an even head count >= 2, got {params.heads}")
    p = pad_to_divisible(x, spec)
    hp, wp = p.valid.shape
    valid = p.valid if mask_padding else None
    with flop_scope("qkv"):
        q, k, v = qkv_separable(p.x, params)
    (qr, qc), (kr, kc), (vr, vc) = (ops.split_channels(t, 2) for t in (q, k, v))
    half_heads = params.heads // 2
    with flop_scope("row"):
        yr = _branch(qr, kr, vr, build_groups(hp, wp, spec, "row"), half_heads, valid)
    with flop_scope("column"):
        yc = _branch(qc, kc, vc, build_groups(hp, wp, spec, "column"), half_heads, valid)
    y = _project(ops.concat_channels([yr, yc]), params)
    return unpad(p, y)


def ps_attention_sequential(
    x: Tensor, spec: PartitionSpec, params: AttentionParams, block_index: int, mask_padding: bool = True
) -> Tensor:
    """Full-width attention within row groups (even blocks) or column groups (odd blocks)."""
    axis = "row" if block_index % 2 == 0 else "column"
    p = pad_to_divisible(x, spec)
    hp, wp = p.valid.shape
    with flop_scope("qkv"):
        q, k, v = qkv_separable(p.x, params)
    with flop_scope(axis):
        y = _branch(q, k, v, build_groups(hp, wp, spec, axis), params.heads, p.valid if mask_padding else None)
    return unpad(p, _project(y, params))


def ps_attention_vanilla(
    x: Tensor, spec: PartitionSpec, params: AttentionParams, mask_padding: bool = True
) -> Tensor:
    """Full-width attention over each whole pale.

    A token off the pale diagonal lies in two pales (one through its row,
    one through its column); its output is the mean of the two.
    """
    p = pad_to_divisible(x, spec, square=True)
    hp, wp = p.valid.shape
    index = pale_token_index(hp, wp, spec)
    with flop_scope("qkv"):
        q, k, v = qkv_separable(p.x, params)
    with flop_scope("pale"):
        y = _grouped(q, k, v, index, params.heads, p.valid if mask_padding else None)
    membership = np.bincount(index.ravel(), minlength=hp * wp).reshape(1, hp, wp, 1)
    y = ops.scale(y, 1.0 / membership)
    return unpad(p, _project(y, params))


def global_attention(x: Tensor, params: AttentionParams) -> Tensor:
    b, h, w, c = x.shape
    with flop_scope("qkv"):
        q, k, v = qkv_separable(x, params)
    with flop_scope("attn"):
        y = _grouped(q, k, v, np.arange(h * w)[None, :], params.heads, None)
    return _project(y, params)


def mode_spec(mode: str, spec: PartitionSpec | None) -> PartitionSpec | None:
    """The partition a mode actually uses."""
    if mode == "global":
        return None
    if mode == "axial":
        return PartitionSpec(1, 1, True)
    if spec is None:
        raise ValueError(f"mode {mode!r} needs a pale size")
    if mode == "cross_shaped":
        return replace(spec, interlaced=False)
    return replace(spec, interlaced=True)


def attention_forward(
    x: Tensor,
    mode: str,
    params: AttentionParams,
    spec: PartitionSpec | None = None,
    block_index: int = 0,
    mask_padding: bool = True,
) -> Tensor:
    if mode not in MODES:
        raise ValueError(f"unknown attention mode {mode!r}; expected one of {MODES}")
    spec = mode_spec(mode, spec)
    if mode == "global":
        return global_attention(x, params)
    if mode in SPLIT_MODES:
        return ps_attention_parallel(x, spec, params, mask_padding)
    if mode == "pale_sequential":
        return ps_attention_sequential(x, spec, params, block_index, mask_padding)
    return ps_attention_vanilla(x, spec, params, mask_padding)
