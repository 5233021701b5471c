"""Flat ``key = value`` run configuration with dotted keys.

Example::

    model.variant = tiny
    attn.mode = pale_parallel
    pale.s_r = 4,4,2,2
    train.steps = 200

Blank lines and ``#`` comments are ignored; unknown keys are an error.
:meth:`RunConfig.to_text` prints every key in sorted order, so parsing its
output gives back an equal config.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .attention import MODES
from .backbone import VariantConfig, variant_config


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None
    if any(v < 1 for v in vals):
        raise ConfigError(f"expected positive integers, got {text!r}")
    return vals


def _fmt_ints(vals) -> str:
    return ",".join(str(v) for v in vals)


def _choice(options):
    def parse(text: str) -> str:
        if text not in options:
            raise ConfigError(f"{text!r} is not one of {', '.join(options)}")
        return text

    return parse


def _positive(kind):
    def parse(text: str):
        try:
            val = kind(text)
        except ValueError:
            raise ConfigError(f"expected {kind.__name__}, got {text!r}") from None
        if val <= 0:
            raise ConfigError(f"expected a positive value, got {text!r}")
        return val

    return parse


def _int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"expected an integer, got {text!r}") from None


@dataclass(frozen=True)
class RunConfig:
    model_variant: str = "tiny"
    model_dims: tuple[int, ...] | None = None
    model_heads: tuple[int, ...] | None = None
    model_depths: tuple[int, ...] | None = None
    model_mlp_ratios: tuple[int, ...] | None = None
    model_num_classes: int | None = None
    attn_mode: str = "pale_parallel"
    pale_s_r: tuple[int, ...] | None = None
    pale_s_c: tuple[int, ...] | None = None
    seed: int = 0
    precision: str = "f32"
    input_size: tuple[int, ...] = (64, 64)
    data_path: str | None = None
    data_eval_path: str | None = None
    train_steps: int = 200
    train_lr: float = 0.1
    train_batch_size: int = 32
    train_eval_every: int = 50
    out_dir: str | None = None

    def variant(self) -> VariantConfig:
        base = variant_config(self.model_variant)
        n = len(base.dims)
        over = {}
        for key, attr in (
            ("dims", self.model_dims),
            ("heads", self.model_heads),
            ("depths", self.model_depths),
            ("mlp_ratios", self.model_mlp_ratios),
        ):
            if attr is not None:
                over[key] = attr
        if self.model_num_classes is not None:
            over["num_classes"] = self.model_num_classes
        if self.pale_s_r is not None or self.pale_s_c is not None:
            s_r = _per_stage(self.pale_s_r, [s for s, _ in base.pale_sizes], n, "pale.s_r")
            s_c = _per_stage(self.pale_s_c, [s for _, s in base.pale_sizes], n, "pale.s_c")
            over["pale_sizes"] = tuple(zip(s_r, s_c))
        over["attn_mode"] = self.attn_mode
        try:
            return replace(base, **over)
        except ValueError as err:
            raise ConfigError(str(err)) from None

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def to_text(self) -> str:
        lines = []
        for key, (attr, _, fmt) in sorted(_KEYS.items()):
            val = getattr(self, attr)
            if val is not None:
                lines.append(f"{key} = {fmt(val)}")
        return "\n".join(lines) + "\n"


def _per_stage(vals, default, n, key):
    if vals is None:
        return tuple(default)
    if len(vals) == 1:
        return vals * n
    if len(vals) != n:
        raise ConfigError(f"{key} needs 1 or {n} values, got {len(vals)}")
    return vals


_KEYS = {
    "model.variant": ("model_variant", _choice(("T", "S", "B", "tiny")), str),
    "model.dims": ("model_dims", _ints, _fmt_ints),
    "model.heads": ("model_heads", _ints, _fmt_ints),
    "model.depths": ("model_depths", _ints, _fmt_ints),
    "model.mlp_ratios": ("model_mlp_ratios", _ints, _fmt_ints),
    "model.num_classes": ("model_num_classes", _positive(int), str),
    "attn.mode": ("attn_mode", _choice(MODES), str),
    "pale.s_r": ("pale_s_r", _ints, _fmt_ints),
    "pale.s_c": ("pale_s_c", _ints, _fmt_ints),
    "seed": ("seed", _int, str),
    "precision": ("precision", _choice(("f32", "f64")), str),
    "input.size": ("input_size", _ints, _fmt_ints),
    "data.path": ("data_path", str, str),
    "data.eval_path": ("data_eval_path", str, str),
    "train.steps": ("train_steps", _positive(int), str),
    "train.lr": ("train_lr", _positive(float), repr),
    "train.batch_size": ("train_batch_size", _positive(int), str),
    "train.eval_every": ("train_eval_every", _positive(int), str),
    "out.dir": ("out_dir", str, str),
}
assert {a for a, _, _ in _KEYS.values()} == {f.name for f in fields(RunConfig)}


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        attr, parse, _ = _KEYS[key]
        try:
            values[attr] = parse(val)
        except ConfigError as err:
            raise ConfigError(f"line {lineno}: {key}: {err}") from None
    cfg = replace(base or RunConfig(), **values)
    if len(cfg.input_size) == 1:
        cfg = replace(cfg, input_size=cfg.input_size * 2)
    elif len(cfg.input_size) != 2:
        raise ConfigError("input.size takes one or two integers")
    return cfg


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())
