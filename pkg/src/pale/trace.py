"""Scoped multiply-add accounting.

A :class:`FlopTrace` is activated with :func:`trace_flops` and collects the
multiply-add (MA) counts reported by forward ops while it is active.  The
active trace lives in a :class:`contextvars.ContextVar`, so two threads (or
two asyncio tasks) each see only their own trace.
"""

from __future__ import annotations

import contextlib
from contextvars import ContextVar
from dataclasses import dataclass, field
from typing import Iterator

# Kinds that are multiply-adds of products; everything else is bookkeeping.
MA_KINDS = ("matmul", "conv")

_active: ContextVar["FlopTrace | None"] = ContextVar("pale_flop_trace", default=None)
_scope: ContextVar[tuple[str, ...]] = ContextVar("pale_flop_scope", default=())


@dataclass
class FlopTrace:
    label: str = ""
    counts: dict[tuple[str, str], int] = field(default_factory=dict)

    def add(self, kind: str, n: int, scope: str = "") -> None:
        if n < 0:
            raise ValueError(f"negative count {n} for {kind}")
        key = (scope, kind)
        self.counts[key] = self.counts.get(key, 0) + int(n)

    def total(self, kind: str | None = None, scope: str | None = None) -> int:
        """Sum of counts, optionally filtered.

        ``kind=None`` sums the multiply-add kinds only.  ``scope`` matches any
        recorded path that contains it as a ``/``-separated segment.
        """
        out = 0
        for (path, k), n in self.counts.items():
            if kind is None and k not in MA_KINDS:
                continue
            if kind is not None and k != kind:
                continue
            if scope is not None and scope not in path.split("/"):
                continue
            out += n
        return out

    def by_scope(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for (path, k), n in self.counts.items():
            if k in MA_KINDS:
                out[path] = out.get(path, 0) + n
        return out

    def __add__(self, other: "FlopTrace") -> "FlopTrace":
        merged = FlopTrace(self.label or other.label, dict(self.counts))
        for key, n in other.counts.items():
            merged.counts[key] = merged.counts.get(key, 0) + n
        return merged


@contextlib.contextmanager
def trace_flops(label: str = "") -> Iterator[FlopTrace]:
    tr = FlopTrace(label)
    token = _active.set(tr)
    try:
        yield tr
    finally:
        _active.reset(token)


@contextlib.contextmanager
def flop_scope(name: str) -> Iterator[None]:
    token = _scope.set(_scope.get() + (name,))
    try:
        yield
    finally:
        _scope.reset(token)


def record(kind: str, n: int) -> None:
    tr = _active.get()
    if tr is not None:
        tr.add(kind, n, "/".join(_scope.get()))
