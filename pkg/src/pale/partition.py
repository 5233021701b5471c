"""Row/column token groupings that make up pales, plus padding.

A row group holds ``s_r`` full rows of the feature map.  Interlaced groups
take every ``N``-th row (``N = h / s_r``), so group ``g`` is rows
``g, g + N, g + 2N, ...``; contiguous groups (the cross-shaped stripe
baseline) take rows ``g*s_r .. g*s_r + s_r - 1``.  Columns work the same way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import ops
from .tensor import Tensor

Axis = Literal["row", "column"]


@dataclass(frozen=True)
class PartitionSpec:
    s_r: int
    s_c: int
    interlaced: bool = True

    def __post_init__(self):
        if self.s_r < 1 or self.s_c < 1:
            raise ValueError(f"pale size must be positive, got ({self.s_r}, {self.s_c})")

    def padded_extents(self, h: int, w: int, square: bool = False) -> tuple[int, int]:
        """Smallest extents >= (h, w) divisible by the pale size.

        With ``square=True`` the row and column group counts are also made
        equal, as whole-pale attention needs.
        """
        nr, nc = math.ceil(h / self.s_r), math.ceil(w / self.s_c)
        if square:
            nr = nc = max(nr, nc)
        return nr * self.s_r, nc * self.s_c


@dataclass(frozen=True)
class IndexGroups:
    axis: Axis
    h: int
    w: int
    lines: np.ndarray  # (group_count, lines_per_group) row or column indices
    interlaced: bool

    @property
    def group_count(self) -> int:
        return self.lines.shape[0]

    @property
    def groups(self) -> list[list[tuple[int, int]]]:
        """Ordered ``(row, col)`` coordinates of each group."""
        return [[divmod(int(t), self.w) for t in row] for row in self.token_index()]

    def token_index(self) -> np.ndarray:
        """Flat token indices ``row * w + col``, shape ``(group_count, tokens_per_group)``.

        Tokens are ordered line by line, so a row group lists its rows in
        member order, each left to right.
        """
        if self.axis == "row":
            cols = np.arange(self.w)
            idx = self.lines[:, :, None] * self.w + cols[None, None, :]
        else:
            rows = np.arange(self.h)
            idx = rows[None, None, :] * self.w + self.lines[:, :, None]
            idx = idx.transpose(0, 2, 1)
        return idx.reshape(self.group_count, -1)


def build_groups(h: int, w: int, spec: PartitionSpec, axis: Axis) -> IndexGroups:
    if axis not in ("row", "column"):
        raise ValueError(f"unknown axis {axis!r}")
    extent, size = (h, spec.s_r) if axis == "row" else (w, spec.s_c)
    if size > extent or extent % size:
        raise ValueError(f"{axis} extent {extent} is not divisible by pale size {size}; pad first")
    n = extent // size
    if spec.interlaced:
        lines = np.arange(extent).reshape(size, n).T
    else:
        lines = np.arange(extent).reshape(n, size)
    return IndexGroups(axis, h, w, np.ascontiguousarray(lines), spec.interlaced)


def pale_token_count(h: int, w: int, s_r: int, s_c: int) -> int:
    if h % s_r or w % s_c:
        raise ValueError("extents must be divisible by the pale size")
    return s_r * w + s_c * h - s_r * s_c


def pale_token_index(h: int, w: int, spec: PartitionSpec) -> np.ndarray:
    """Flat token indices of every whole pale, shape ``(N, s_r*w + s_c*h - s_r*s_c)``.

    Pale ``g`` is the union of row group ``g`` and column group ``g``; the
    intersection tokens appear once.  Row-group tokens come first, then the
    column-group tokens not already covered.
    """
    rows = build_groups(h, w, spec, "row")
    cols = build_groups(h, w, spec, "column")
    if rows.group_count != cols.group_count:
        raise ValueError(f"row and column group counts differ ({rows.group_count} vs {cols.group_count})")
    ridx, cidx = rows.token_index(), cols.token_index()
    in_row = np.zeros((rows.group_count, h), dtype=bool)
    np.put_along_axis(in_row, rows.lines, True, axis=1)
    out = []
    for g in range(rows.group_count):
        extra = cidx[g][~in_row[g][cidx[g] // w]]
        out.append(np.concatenate([ridx[g], extra]))
    return np.stack(out)


@dataclass(frozen=True)
class Padded:
    x: Tensor
    valid: np.ndarray  # (h_pad, w_pad) bool, False on padded tokens
    h: int
    w: int

    @property
    def pad_count(self) -> int:
        return int((~self.valid).sum())


def pad_to_divisible(x: Tensor, spec: PartitionSpec, square: bool = False) -> Padded:
    """Zero-pad bottom/right up to multiples of the pale size and mark padded tokens."""
    h, w = x.shape[1:3]
    hp, wp = spec.padded_extents(h, w, square)
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:h, :w] = True
    return Padded(ops.pad_spatial(x, hp - h, wp - w), valid, h, w)


def unpad(p: Padded, y: Tensor) -> Tensor:
    return ops.crop_spatial(y, p.h, p.w)


def gather_groups(x: Tensor, groups: IndexGroups) -> Tensor:
    """``(b, h, w, c)`` -> ``(b, group_count, tokens_per_group, c)``."""
    b, h, w, c = x.shape
    if (h, w) != (groups.h, groups.w):
        raise ValueError(f"groups built for {groups.h}x{groups.w}, tensor is {h}x{w}")
    return ops.take_tokens(ops.reshape(x, (b, h * w, c)), groups.token_index())


def scatter_groups(y: Tensor, groups: IndexGroups) -> Tensor:
    b, c = y.shape[0], y.shape[-1]
    flat = ops.scatter_tokens(y, groups.token_index(), groups.h * groups.w)
    return ops.reshape(flat, (b, groups.h, groups.w, c))
