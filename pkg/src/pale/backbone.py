"""The four-stage Pale Transformer.

Each stage is a strided patch-merging convolution (+ LayerNorm) followed by
blocks of the form::

    x = x + cpe(x)                     # residual depthwise 3x3
    x = x + attention(layer_norm(x))
    x = x + mlp(layer_norm(x))

and the classifier is LayerNorm -> global average pool -> linear.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import ops
from .attention import MODES, AttentionParams, attention_forward
from .init import ones, trunc_normal, zeros
from .partition import PartitionSpec
from .tensor import Tensor
from .trace import flop_scope

LN_EPS = 1e-5


@dataclass(frozen=True)
class VariantConfig:
    name: str
    dims: tuple[int, ...]
    heads: tuple[int, ...]
    depths: tuple[int, ...] = (2, 2, 16, 2)
    pale_sizes: tuple[tuple[int, int], ...] = ((7, 7),) * 4
    mlp_ratios: tuple[int, ...] = (4, 4, 4, 4)
    strides: tuple[int, ...] = (4, 2, 2, 2)
    num_classes: int = 1000
    in_chans: int = 3
    attn_mode: str = "pale_parallel"

    def __post_init__(self):
        n = len(self.dims)
        for label, seq in (
            ("heads", self.heads),
            ("depths", self.depths),
            ("pale_sizes", self.pale_sizes),
            ("mlp_ratios", self.mlp_ratios),
            ("strides", self.strides),
        ):
            if len(seq) != n:
                raise ValueError(f"{label} has {len(seq)} entries, expected {n}")
        for c, h in zip(self.dims, self.heads):
            if h < 1 or c % h:
                raise ValueError(f"{h} heads do not divide {c} channels")
        if self.attn_mode not in MODES:
            raise ValueError(f"unknown attention mode {self.attn_mode!r}")
        if self.strides[0] != 4 or any(s != 2 for s in self.strides[1:]):
            raise ValueError("patch merging supports strides 4 then 2")

    def merge_geometry(self, stage: int) -> tuple[int, int, int]:
        """(kernel, stride, pad) of a stage's patch-merging conv."""
        return (7, 4, 3) if stage == 0 else (3, 2, 1)

    def spec(self, stage: int) -> PartitionSpec:
        s_r, s_c = self.pale_sizes[stage]
        return PartitionSpec(s_r, s_c, self.attn_mode != "cross_shaped")


VARIANTS = {
    "T": dict(dims=(64, 128, 256, 512), heads=(2, 4, 8, 16)),
    "S": dict(dims=(96, 192, 384, 768), heads=(2, 4, 8, 16)),
    "B": dict(dims=(128, 256, 512, 1024), heads=(4, 8, 16, 32)),
    # desk-scale model for the toy training loop
    "tiny": dict(
        dims=(16, 32, 64, 128),
        heads=(2, 2, 4, 4),
        depths=(1, 1, 2, 1),
        pale_sizes=((4, 4), (4, 4), (2, 2), (2, 2)),
        num_classes=10,
    ),
}


def variant_config(name: str, **overrides) -> VariantConfig:
    key = name[5:] if name.startswith("Pale-") else name
    if key not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    kwargs = dict(VARIANTS[key])
    kwargs.update(overrides)
    return VariantConfig(name=key, **kwargs)


# --------------------------------------------------------------------------
# parameters


@dataclass
class BlockParams:
    cpe_weight: Tensor  # (3, 3, 1, C)
    cpe_bias: Tensor
    norm1_gamma: Tensor
    norm1_beta: Tensor
    attn: AttentionParams
    norm2_gamma: Tensor
    norm2_beta: Tensor
    fc1_weight: Tensor  # (C, R*C)
    fc1_bias: Tensor
    fc2_weight: Tensor  # (R*C, C)
    fc2_bias: Tensor

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "cpe.weight", self.cpe_weight
        yield "cpe.bias", self.cpe_bias
        yield "norm1.gamma", self.norm1_gamma
        yield "norm1.beta", self.norm1_beta
        for name, t in self.attn.named():
            yield f"attn.{name}", t
        yield "norm2.gamma", self.norm2_gamma
        yield "norm2.beta", self.norm2_beta
        yield "mlp.fc1.weight", self.fc1_weight
        yield "mlp.fc1.bias", self.fc1_bias
        yield "mlp.fc2.weight", self.fc2_weight
        yield "mlp.fc2.bias", self.fc2_bias

    @classmethod
    def init(cls, c: int, heads: int, ratio: int, rng, dtype=np.float32, std: float = 0.02) -> "BlockParams":
        hidden = ratio * c
        return cls(
            cpe_weight=trunc_normal(rng, (3, 3, 1, c), std, dtype),
            cpe_bias=zeros((c,), dtype),
            norm1_gamma=ones((c,), dtype),
            norm1_beta=zeros((c,), dtype),
            attn=AttentionParams.init(c, heads, rng, dtype, std),
            norm2_gamma=ones((c,), dtype),
            norm2_beta=zeros((c,), dtype),
            fc1_weight=trunc_normal(rng, (c, hidden), std, dtype),
            fc1_bias=zeros((hidden,), dtype),
            fc2_weight=trunc_normal(rng, (hidden, c), std, dtype),
            fc2_bias=zeros((c,), dtype),
        )


@dataclass
class StageParams:
    merge_weight: Tensor  # (k, k, c_in, C)
    merge_bias: Tensor
    merge_gamma: Tensor
    merge_beta: Tensor
    blocks: list[BlockParams] = field(default_factory=list)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "merge.weight", self.merge_weight
        yield "merge.bias", self.merge_bias
        yield "merge.norm.gamma", self.merge_gamma
        yield "merge.norm.beta", self.merge_beta
        for j, blk in enumerate(self.blocks):
            for name, t in blk.named():
                yield f"blocks.{j}.{name}", t


@dataclass
class PaleTransformer:
    config: VariantConfig
    stages: list[StageParams]
    norm_gamma: Tensor
    norm_beta: Tensor
    head_weight: Tensor  # (C_4, num_classes)
    head_bias: Tensor

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for i, st in enumerate(self.stages):
            for name, t in st.named():
                yield f"stages.{i}.{name}", t
        yield "norm.gamma", self.norm_gamma
        yield "norm.beta", self.norm_beta
        yield "head.weight", self.head_weight
        yield "head.bias", self.head_bias

    def state_dict(self) -> dict[str, Tensor]:
        return dict(self.named())

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def num_params(self) -> int:
        return sum(t.data.size for t in self.parameters())

    @property
    def dtype(self):
        return self.head_weight.dtype

    def __call__(self, images: Tensor) -> Tensor:
        return forward(self, images)


def init_model(config: VariantConfig, seed: int = 0, dtype=np.float32, std: float = 0.02) -> PaleTransformer:
    rng = np.random.default_rng(seed)
    stages = []
    c_in = config.in_chans
    for i, c in enumerate(config.dims):
        k, _, _ = config.merge_geometry(i)
        st = StageParams(
            merge_weight=trunc_normal(rng, (k, k, c_in, c), std, dtype),
            merge_bias=zeros((c,), dtype),
            merge_gamma=ones((c,), dtype),
            merge_beta=zeros((c,), dtype),
        )
        for _ in range(config.depths[i]):
            st.blocks.append(BlockParams.init(c, config.heads[i], config.mlp_ratios[i], rng, dtype, std))
        stages.append(st)
        c_in = c
    c = config.dims[-1]
    return PaleTransformer(
        config,
        stages,
        ones((c,), dtype),
        zeros((c,), dtype),
        trunc_normal(rng, (c, config.num_classes), std, dtype),
        zeros((config.num_classes,), dtype),
    )


def init_variant(name: str, num_classes: int | None = None, seed: int = 0, dtype=np.float32) -> PaleTransformer:
    overrides = {} if num_classes is None else {"num_classes": num_classes}
    return init_model(variant_config(name, **overrides), seed, dtype)


def model_from_state(config: VariantConfig, state: dict[str, np.ndarray]) -> PaleTransformer:
    """Build a model whose parameters are copied from ``state`` (names must match exactly)."""
    first = next(iter(state.values()))
    model = init_model(config, seed=0, dtype=first.dtype)
    names = [n for n, _ in model.named()]
    if list(state) != names:
        missing = sorted(set(names) - set(state))
        extra = sorted(set(state) - set(names))
        raise ValueError(f"state does not match config (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, t in model.named():
        arr = state[name]
        if arr.shape != t.shape:
            raise ValueError(f"{name}: shape {arr.shape} != {t.shape}")
        t.data = np.array(arr, dtype=t.dtype)
    return model


# --------------------------------------------------------------------------
# layers


def cpe(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Conditional position encoding: ``x + depthwise3x3(x)``."""
    return ops.add(x, ops.conv2d(x, weight, bias, stride=1, pad=1, groups=x.shape[-1]))


def mlp(x: Tensor, fc1_w: Tensor, fc1_b: Tensor, fc2_w: Tensor, fc2_b: Tensor, ratio: int | None = None) -> Tensor:
    c = x.shape[-1]
    if fc1_w.shape[0] != c or fc2_w.shape != (fc1_w.shape[1], c):
        raise ValueError("mlp weight shapes do not match the input width")
    if ratio is not None and fc1_w.shape[1] != ratio * c:
        raise ValueError(f"hidden width {fc1_w.shape[1]} != {ratio} x {c}")
    return ops.linear(ops.gelu(ops.linear(x, fc1_w, fc1_b)), fc2_w, fc2_b)


def drop_path(x: Tensor) -> Tensor:
    # stochastic depth hook; training-recipe regulariser, intentionally identity
    return x


def pale_block(
    x: Tensor, p: BlockParams, mode: str, block_index: int, spec: PartitionSpec | None, mask_padding: bool = True
) -> Tensor:
    with flop_scope("cpe"):
        x = cpe(x, p.cpe_weight, p.cpe_bias)
    with flop_scope("attn"):
        a = attention_forward(
            ops.layer_norm(x, p.norm1_gamma, p.norm1_beta, LN_EPS), mode, p.attn, spec, block_index, mask_padding
        )
    x = ops.add(x, drop_path(a))
    with flop_scope("mlp"):
        m = mlp(ops.layer_norm(x, p.norm2_gamma, p.norm2_beta, LN_EPS), p.fc1_weight, p.fc1_bias, p.fc2_weight, p.fc2_bias)
    return ops.add(x, drop_path(m))


def patch_merge(x: Tensor, stage_index: int, st: StageParams, config: VariantConfig) -> Tensor:
    k, stride, pad = config.merge_geometry(stage_index)
    if x.shape[1] + 2 * pad < k or x.shape[2] + 2 * pad < k:
        raise ValueError(f"input {x.shape[1]}x{x.shape[2]} is smaller than the {k}x{k} merge kernel")
    with flop_scope("merge"):
        y = ops.conv2d(x, st.merge_weight, st.merge_bias, stride=stride, pad=pad)
        return ops.layer_norm(y, st.merge_gamma, st.merge_beta, LN_EPS)


def forward_features(model: PaleTransformer, images: Tensor, mask_padding: bool = True) -> list[Tensor]:
    """Per-stage feature maps."""
    cfg = model.config
    feats = []
    x = images
    for i, st in enumerate(model.stages):
        with flop_scope(f"stage{i}"):
            x = patch_merge(x, i, st, cfg)
            spec = cfg.spec(i)
            for j, blk in enumerate(st.blocks):
                with flop_scope(f"block{j}"):
                    x = pale_block(x, blk, cfg.attn_mode, j, spec, mask_padding)
        feats.append(x)
    return feats


def forward(model: PaleTransformer, images: Tensor, mask_padding: bool = True) -> Tensor:
    cfg = model.config
    if images.ndim != 4 or images.shape[-1] != cfg.in_chans:
        raise ValueError(f"expected (b, h, w, {cfg.in_chans}) images, got {images.shape}")
    if min(images.shape[1:3]) < 32:
        raise ValueError("spatial extents must be at least 32")
    x = forward_features(model, images, mask_padding)[-1]
    with flop_scope("head"):
        x = ops.layer_norm(x, model.norm_gamma, model.norm_beta, LN_EPS)
        x = ops.reshape(ops.mean_pool_spatial(x), (x.shape[0], x.shape[-1]))
        return ops.linear(x, model.head_weight, model.head_bias)


def with_mode(config: VariantConfig, mode: str) -> VariantConfig:
    return replace(config, attn_mode=mode)
