from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .ops import mul, sum_all
from .tensor import Tensor


def grad_check(
    f: Callable[..., Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Largest relative gap between backprop and central differences.

    ``f(*inputs)`` must return a tensor built from :mod:`pale.ops`.  A
    non-scalar output is reduced with fixed random weights, so every output
    coordinate contributes.  The step for coordinate ``i`` is
    ``eps * max(1, |x_i|)``; the error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check needs float64 inputs")

    probe = f(*inputs)
    weights = np.random.default_rng(seed).standard_normal(probe.shape)

    def objective() -> Tensor:
        out = f(*inputs)
        return sum_all(mul(out, Tensor(weights, dtype=out.dtype)))

    saved = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        objective().backward()
        analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
        worst = 0.0
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            a = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                step = eps * max(1.0, abs(orig))
                hi, lo = orig + step, orig - step
                flat[i] = hi
                up = float(objective().data)
                flat[i] = lo
                down = float(objective().data)
                flat[i] = orig
                # divide by the representable step, not the nominal one
                numeric = (up - down) / (hi - lo)
                denom = max(abs(a[i]), abs(numeric), 1e-8)
                worst = max(worst, abs(a[i] - numeric) / denom)
        return worst
    finally:
        for t, rg in zip(inputs, saved):
            t.requires_grad = rg
            t.grad = None
