from __future__ import annotations

import csv
import statistics
import time
from typing import IO, Sequence

import numpy as np

from .attention import AttentionParams, attention_forward, mode_spec
from .partition import PartitionSpec
from .tensor import Tensor
from .trace import trace_flops

HEADER = ["mode", "h", "w", "c", "s_r", "s_c", "ma_count", "median_ms"]


def bench_attention(
    modes: Sequence[str],
    shapes: Sequence[tuple[int, int, int, int]],
    pale: tuple[int, int] = (7, 7),
    repeats: int = 5,
    heads: int = 2,
    seed: int = 0,
) -> list[dict]:
    """Median wall time of one attention forward per (mode, shape), with its traced MA count."""
    if not modes:
        raise ValueError("no attention modes given")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rng = np.random.default_rng(seed)
    rows = []
    for b, h, w, c in shapes:
        params = AttentionParams.init(c, heads, rng)
        x = Tensor(rng.standard_normal((b, h, w, c)))
        for mode in modes:
            spec = mode_spec(mode, PartitionSpec(*pale))
            with trace_flops() as tr:
                attention_forward(x, mode, params, spec)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                attention_forward(x, mode, params, spec)
                times.append((time.perf_counter() - t0) * 1e3)
            s_r, s_c = (0, 0) if spec is None else (spec.s_r, spec.s_c)
            rows.append(
                {
                    "mode": mode,
                    "h": h,
                    "w": w,
                    "c": c,
                    "s_r": s_r,
                    "s_c": s_c,
                    "ma_count": tr.total() // b,
                    "median_ms": round(statistics.median(times), 3),
                }
            )
    return rows


def write_csv(rows: list[dict], stream: IO[str]) -> None:
    writer = csv.DictWriter(stream, fieldnames=HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
