"""Closed-form multiply-add (MA) and parameter counts.

One MA is one multiply-accumulate of a matmul or convolution.  LayerNorm,
softmax, activation and pooling work is tallied separately as ``other`` and
never enters the attention formulas.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .backbone import VariantConfig
from .partition import PartitionSpec
from .trace import FlopTrace


@dataclass
class FlopReport:
    terms: dict[str, int]
    layers: list[dict] = field(default_factory=list)
    other: int = 0

    def __post_init__(self):
        if any(v < 0 for v in self.terms.values()):
            raise ValueError("negative term in FlopReport")

    @property
    def total(self) -> int:
        return sum(self.terms.values())

    @property
    def total_flops(self) -> int:
        """Total under the multiply + add (x2) convention."""
        return 2 * self.total


def flops_global_attention(h: int, w: int, c: int, separable: bool = False) -> FlopReport:
    """Global self-attention: ``4hwc^2 + 2c(hw)^2`` with linear QKV.

    ``separable=True`` prices QKV as 3x3 depthwise + pointwise, which is what
    the backbone uses when run in global mode.
    """
    if min(h, w, c) < 1:
        raise ValueError("extents must be positive")
    hw = h * w
    qkv = 3 * hw * c * c + (27 * hw * c if separable else 0)
    return FlopReport({"qkv": qkv, "attn": 2 * c * hw * hw, "proj": hw * c * c})


def flops_pale_attention(h: int, w: int, c: int, s_r: int, s_c: int) -> FlopReport:
    """Parallel pale attention: ``4hwc^2 + hwc(s_c h + s_r w + 27)``."""
    if h % s_r or w % s_c:
        raise ValueError(f"({h}, {w}) is not divisible by pale size ({s_r}, {s_c})")
    return FlopReport(
        {
            "qkv": 27 * h * w * c + 3 * h * w * c * c,
            "row": h * w * w * c * s_r,
            "column": h * h * w * c * s_c,
            "proj": h * w * c * c,
        }
    )


def flops_attention_mode(
    mode: str, h: int, w: int, c: int, spec: PartitionSpec | None = None, block_index: int = 0
) -> FlopReport:
    """Attention cost of one block in any mode, on the padded extents it actually runs at."""
    if mode == "global":
        return flops_global_attention(h, w, c, separable=True)
    if mode == "axial":
        spec = PartitionSpec(1, 1)
    if spec is None:
        raise ValueError(f"mode {mode!r} needs a pale size")
    if mode in ("axial", "cross_shaped", "pale_parallel"):
        hp, wp = spec.padded_extents(h, w)
        return flops_pale_attention(hp, wp, c, spec.s_r, spec.s_c)
    if mode == "pale_sequential":
        hp, wp = spec.padded_extents(h, w)
        base = {"qkv": 27 * hp * wp * c + 3 * hp * wp * c * c}
        if block_index % 2 == 0:
            base["row"] = 2 * hp * wp * wp * c * spec.s_r
        else:
            base["column"] = 2 * hp * hp * wp * c * spec.s_c
        base["proj"] = hp * wp * c * c
        return FlopReport(base)
    if mode == "pale_vanilla":
        hp, wp = spec.padded_extents(h, w, square=True)
        n_pales = hp // spec.s_r
        tokens = spec.s_r * wp + spec.s_c * hp - spec.s_r * spec.s_c
        return FlopReport(
            {
                "qkv": 27 * hp * wp * c + 3 * hp * wp * c * c,
                "pale": 2 * n_pales * tokens * tokens * c,
                "proj": hp * wp * c * c,
            }
        )
    raise ValueError(f"unknown attention mode {mode!r}")


def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def model_flops(config: VariantConfig, size: tuple[int, int] = (224, 224)) -> FlopReport:
    """MA count of one forward pass on a single image, with a per-layer table."""
    h, w = size
    c_in = config.in_chans
    layers: list[dict] = []
    other = 0
    for i, c in enumerate(config.dims):
        k, stride, pad = config.merge_geometry(i)
        h, w = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
        merge = h * w * k * k * c_in * c
        layers.append({"layer": f"stage{i}.merge", "h": h, "w": w, "c": c, "conv": merge})
        other += h * w * c  # merge LayerNorm
        spec = config.spec(i)
        hidden = config.mlp_ratios[i] * c
        for j in range(config.depths[i]):
            attn = flops_attention_mode(config.attn_mode, h, w, c, spec, j)
            row = {"layer": f"stage{i}.block{j}", "h": h, "w": w, "c": c, "cpe": 9 * h * w * c}
            row.update({f"attn.{t}": n for t, n in attn.terms.items()})
            row["mlp"] = 2 * h * w * c * hidden
            layers.append(row)
            other += 2 * h * w * c  # two LayerNorms
        c_in = c
    other += h * w * c_in  # final LayerNorm
    layers.append({"layer": "head", "linear": c_in * config.num_classes})

    terms = {"merge": 0, "cpe": 0, "attn": 0, "mlp": 0, "head": 0}
    for row in layers:
        name = row["layer"]
        if name.endswith(".merge"):
            terms["merge"] += row["conv"]
        elif name == "head":
            terms["head"] += row["linear"]
        else:
            terms["cpe"] += row["cpe"]
            terms["mlp"] += row["mlp"]
            terms["attn"] += sum(v for key, v in row.items() if key.startswith("attn."))
    return FlopReport(terms, layers, other)


def model_params(config: VariantConfig) -> dict[str, int]:
    """Parameter counts: ``total`` plus the ``bias`` share and per-stage totals."""
    total = bias = 0
    per_stage = []
    c_in = config.in_chans
    for i, c in enumerate(config.dims):
        k, _, _ = config.merge_geometry(i)
        stage_w = k * k * c_in * c + 2 * c  # merge conv + LN
        stage_b = c
        hidden = config.mlp_ratios[i] * c
        block_w = (
            9 * c  # cpe
            + 4 * c  # two LNs
            + 3 * (9 * c + c * c)  # separable QKV
            + c * c  # output projection
            + c * hidden
            + hidden * c
        )
        block_b = c + 3 * c + c + hidden + c
        stage_w += config.depths[i] * block_w
        stage_b += config.depths[i] * block_b
        per_stage.append(stage_w + stage_b)
        total += stage_w + stage_b
        bias += stage_b
        c_in = c
    head = 2 * c_in + c_in * config.num_classes + config.num_classes
    total += head
    bias += config.num_classes
    return {"total": total, "bias": bias, "head": head, **{f"stage{i}": n for i, n in enumerate(per_stage)}}


@dataclass
class TraceComparison:
    rows: list[tuple[str, int, int]]  # (term, analytic, traced)

    @property
    def ok(self) -> bool:
        return all(a == t for _, a, t in self.rows)

    def mismatches(self) -> list[str]:
        return [f"{name}: analytic {a} != traced {t}" for name, a, t in self.rows if a != t]


def verify_against_trace(analytic: FlopReport, trace: FlopTrace, batch: int = 1) -> TraceComparison:
    """Compare each analytic term with the traced MAs recorded under the scope of the same name."""
    rows = [(name, n * batch, trace.total(scope=name)) for name, n in analytic.terms.items()]
    rows.append(("total", analytic.total * batch, trace.total()))
    return TraceComparison(rows)


# Reported in the published comparison table: (params, FLOPs) at 224 x 224.
PUBLISHED = {
    "T": (22e6, 4.2e9),
    "S": (48e6, 9.0e9),
    "B": (85e6, 15.6e9),
}
PARAM_TOL = 0.05
FLOP_TOL = 0.10


def within(value: float, target: float, tol: float) -> bool:
    return math.isclose(value, target, rel_tol=0.0, abs_tol=tol * target)
