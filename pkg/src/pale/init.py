from __future__ import annotations

import numpy as np

from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> Tensor:
    """Normal(0, std) samples redrawn until they fall inside +-2 std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return Tensor(out * std, dtype=dtype)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape), dtype=dtype)


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape), dtype=dtype)
