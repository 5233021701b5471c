"""Slow reference attention used to check the fast paths.

Nothing here touches :mod:`pale.ops` or :mod:`pale.partition`.  Groups are
defined by membership predicates on coordinates, QKV by explicit loops, and
attention by one query at a time, always in float64.  Padded positions are
never materialised: the reference simply leaves them out of every group.
"""

from __future__ import annotations

import math

import numpy as np


def _np(t) -> np.ndarray:
    return np.asarray(getattr(t, "data", t), dtype=np.float64)


def oracle_projection(x: np.ndarray, phi) -> np.ndarray:
    """Depthwise 3x3 (zero boundary) then pointwise, one offset at a time."""
    b, h, w, c = x.shape
    y = x
    if phi.depthwise is not None:
        kern = _np(phi.depthwise)
        y = np.zeros_like(x)
        for r in range(h):
            for s in range(w):
                acc = np.zeros((b, c))
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        rr, ss = r + di, s + dj
                        if 0 <= rr < h and 0 <= ss < w:
                            acc += x[:, rr, ss, :] * kern[di + 1, dj + 1, 0, :]
                y[:, r, s, :] = acc
    out = np.einsum("bhwc,co->bhwo", y, _np(phi.pointwise))
    if phi.bias is not None:
        out = out + _np(phi.bias)
    return out


def oracle_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, groups, heads: int) -> np.ndarray:
    """Per-group, per-head, per-query softmax attention.

    ``q, k, v`` are ``(h, w, d)`` for one image; ``groups`` is a list of
    ``(row, col)`` coordinate lists.  Returns a dict mapping each coordinate
    to the list of outputs it received (one per group containing it).
    """
    d = q.shape[-1]
    dh = d // heads
    received: dict[tuple[int, int], list[np.ndarray]] = {}
    for members in groups:
        for qi in members:
            out = np.zeros(d)
            for hd in range(heads):
                sl = slice(hd * dh, (hd + 1) * dh)
                qv = q[qi][sl]
                logits = [float(np.dot(qv, k[kj][sl])) / math.sqrt(dh) for kj in members]
                top = max(logits)
                weights = [math.exp(z - top) for z in logits]
                total = sum(weights)
                for wgt, kj in zip(weights, members):
                    out[sl] += (wgt / total) * v[kj][sl]
            received.setdefault(qi, []).append(out)
    return received


def _line_groups(extent: int, size: int, interlaced: bool) -> list[list[int]]:
    n = -(-extent // size) if size else 1
    padded = n * size
    if interlaced:
        return [[i for i in range(padded) if i % n == g] for g in range(n)]
    return [[i for i in range(padded) if i // size == g] for g in range(n)]


def reference_groups(h: int, w: int, mode: str, s_r: int = 1, s_c: int = 1, block_index: int = 0):
    """Coordinate groups of each branch for ``mode`` on an ``h x w`` map.

    Returns a list of branches; each branch is a list of groups restricted to
    real (unpadded) tokens.
    """
    def keep(cells):
        return [(r, s) for (r, s) in cells if r < h and s < w]

    if mode == "global":
        return [[[(r, s) for r in range(h) for s in range(w)]]]
    if mode == "axial":
        s_r, s_c = 1, 1
    interlaced = mode != "cross_shaped"

    nr = -(-h // s_r)
    nc = -(-w // s_c)
    if mode == "pale_vanilla":
        nr = nc = max(nr, nc)
    hp, wp = nr * s_r, nc * s_c
    row_lines = _line_groups(hp, s_r, interlaced)
    col_lines = _line_groups(wp, s_c, interlaced)
    row_groups = [keep([(r, s) for r in lines for s in range(wp)]) for lines in row_lines]
    col_groups = [keep([(r, s) for s in lines for r in range(hp)]) for lines in col_lines]
    if mode in ("axial", "cross_shaped", "pale_parallel"):
        return [row_groups, col_groups]
    if mode == "pale_sequential":
        return [row_groups if block_index % 2 == 0 else col_groups]
    if mode == "pale_vanilla":
        pales = []
        for g in range(nr):
            cells = {(r, s) for r in row_lines[g] for s in range(wp)}
            cells |= {(r, s) for s in col_lines[g] for r in range(hp)}
            pales.append(keep(sorted(cells)))
        return [pales]
    raise ValueError(f"unknown mode {mode!r}")


def oracle_forward(x, mode: str, params, s_r: int = 1, s_c: int = 1, block_index: int = 0) -> np.ndarray:
    """Reference output of :func:`pale.attention.attention_forward`."""
    x = _np(x)
    b, h, w, c = x.shape
    q, k, v = (oracle_projection(x, phi) for phi in (params.q, params.k, params.v))
    branches = reference_groups(h, w, mode, s_r, s_c, block_index)
    width = c // len(branches)
    heads = params.heads // len(branches)
    y = np.zeros_like(x)
    for i in range(b):
        for bi, groups in enumerate(branches):
            sl = slice(bi * width, (bi + 1) * width)
            got = oracle_attention(q[i][..., sl], k[i][..., sl], v[i][..., sl], groups, heads)
            for (r, s), outs in got.items():
                y[i, r, s, sl] = sum(outs) / len(outs)
    y = np.einsum("bhwc,co->bhwo", y, _np(params.proj))
    if params.proj_bias is not None:
        y = y + _np(params.proj_bias)
    return y
