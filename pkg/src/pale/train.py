"""Fixed-step gradient descent on a small backbone."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import ops
from .backbone import PaleTransformer, forward
from .data import Dataset
from .tensor import Tensor
from .trace import trace_flops


@dataclass
class MetricsRecord:
    step: int
    loss: float
    accuracy: float | None
    wall_time: float
    flops: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def evaluate(model: PaleTransformer, ds: Dataset, batch_size: int = 100) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over a whole dataset."""
    total_loss, correct = 0.0, 0
    for start in range(0, len(ds), batch_size):
        xb = Tensor(ds.images[start : start + batch_size], dtype=model.dtype)
        yb = ds.labels[start : start + batch_size]
        logits = forward(model, xb)
        total_loss += float(ops.cross_entropy(logits, yb).data) * len(yb)
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return total_loss / len(ds), correct / len(ds)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield order[start : start + batch_size]


def train(
    model: PaleTransformer,
    train_set: Dataset,
    eval_set: Dataset | None,
    steps: int,
    lr: float,
    batch_size: int,
    seed: int,
    eval_every: int = 50,
    metrics_path: str | Path | None = None,
) -> list[MetricsRecord]:
    """Plain SGD with a constant step size.

    Records at step 0 and every ``eval_every`` steps carry the full loss and
    accuracy on ``eval_set``; the rest carry the minibatch loss.
    """
    if len(train_set) < batch_size:
        raise ValueError(f"dataset has {len(train_set)} samples, fewer than batch size {batch_size}")
    rng = np.random.default_rng(seed)
    params = model.parameters()
    records: list[MetricsRecord] = []
    sink = open(metrics_path, "a") if metrics_path else None
    t0 = time.perf_counter()

    def emit(rec: MetricsRecord) -> None:
        records.append(rec)
        if sink:
            sink.write(rec.to_json() + "\n")
            sink.flush()

    try:
        if eval_set is not None:
            loss, acc = evaluate(model, eval_set)
            emit(MetricsRecord(0, loss, acc, time.perf_counter() - t0, 0))
        for p in params:
            p.requires_grad = True
        flops = 0
        feed = batches(len(train_set), batch_size, rng)
        for step in range(1, steps + 1):
            idx = next(feed)
            with trace_flops() as tr:
                logits = forward(model, Tensor(train_set.images[idx], dtype=model.dtype))
            flops += tr.total()
            loss = ops.cross_entropy(logits, train_set.labels[idx])
            for p in params:
                p.grad = None
            loss.backward()
            for p in params:
                p.data -= lr * p.grad
            if eval_set is not None and (step % eval_every == 0 or step == steps):
                for p in params:
                    p.requires_grad = False
                ev_loss, ev_acc = evaluate(model, eval_set)
                for p in params:
                    p.requires_grad = True
                emit(MetricsRecord(step, ev_loss, ev_acc, time.perf_counter() - t0, flops))
            else:
                emit(MetricsRecord(step, float(loss.data), None, time.perf_counter() - t0, flops))
    finally:
        for p in params:
            p.requires_grad = False
            p.grad = None
        if sink:
            sink.close()
    return records
