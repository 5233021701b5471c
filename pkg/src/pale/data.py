"""Synthetic oriented-texture classification data.

Class ``k`` is a sinusoidal grating whose orientation and spatial frequency
depend on ``k``; phase, colour mix and additive noise are random per sample.
Telling classes apart needs evidence gathered along long lines across the
image, which is what row/column attention provides.

On disk a dataset is a directory holding ``images.f32`` (all samples,
``(h, w, 3)`` each, little-endian float32, back to back) and ``manifest.txt``
with one line per sample::

    <byte offset>\t<label>\t<h>\t<w>\t<c>
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES = "images.f32"
MANIFEST = "manifest.txt"
ORIENTATIONS = 5


@dataclass
class Dataset:
    images: np.ndarray  # (n, h, w, 3) float32
    labels: np.ndarray  # (n,) int64

    def __len__(self) -> int:
        return len(self.labels)


def class_pattern(label: int, size: int, rng: np.random.Generator, noise: float = 0.25) -> np.ndarray:
    theta = np.pi * (label % ORIENTATIONS) / ORIENTATIONS + rng.uniform(-0.05, 0.05)
    cycles = (3.0, 6.0)[label // ORIENTATIONS % 2] * rng.uniform(0.95, 1.05)
    yy, xx = np.mgrid[0:size, 0:size] / size
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * cycles * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    colour = rng.uniform(0.5, 1.0, size=3)
    img = wave[..., None] * colour + noise * rng.standard_normal((size, size, 3))
    return img.astype(np.float32)


def synthesize(classes: int, per_class: int, size: int, seed: int) -> Dataset:
    if classes < 1 or per_class < 1 or size < 1:
        raise ValueError("classes, per_class and size must be positive")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    order = rng.permutation(labels.size)
    labels = labels[order]
    images = np.stack([class_pattern(int(k), size, rng) for k in labels])
    return Dataset(images, labels.astype(np.int64))


def write_dataset(ds: Dataset, directory: str | Path) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    n, h, w, c = ds.images.shape
    stride = h * w * c * 4
    (out / IMAGES).write_bytes(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    lines = [f"{i * stride}\t{int(lab)}\t{h}\t{w}\t{c}\n" for i, lab in enumerate(ds.labels)]
    (out / MANIFEST).write_text("".join(lines))


def gen_synthetic_dataset(classes: int, per_class: int, size: int, seed: int, directory: str | Path) -> Dataset:
    ds = synthesize(classes, per_class, size, seed)
    write_dataset(ds, directory)
    return ds


def read_dataset(directory: str | Path) -> Dataset:
    """Load a dataset written by :func:`write_dataset`, validating the manifest."""
    root = Path(directory)
    raw = (root / IMAGES).read_bytes()
    images, labels = [], []
    for lineno, line in enumerate((root / MANIFEST).read_text().splitlines(), 1):
        fields = line.split("\t")
        if len(fields) != 5:
            raise ValueError(f"{MANIFEST}:{lineno}: expected 5 fields, got {len(fields)}")
        offset, label, h, w, c = (int(f) for f in fields)
        nbytes = h * w * c * 4
        if offset < 0 or offset + nbytes > len(raw):
            raise ValueError(f"{MANIFEST}:{lineno}: sample lies outside {IMAGES}")
        images.append(np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=offset).reshape(h, w, c))
        labels.append(label)
    if not images:
        raise ValueError(f"{MANIFEST} is empty")
    return Dataset(np.stack(images).astype(np.float32), np.asarray(labels, dtype=np.int64))
