"""Pale-shaped self-attention and the Pale Transformer backbone on a small numpy autograd core."""

from .attention import MODES, AttentionParams, attention_forward
from .backbone import PaleTransformer, VariantConfig, forward, init_model, init_variant, variant_config
from .partition import PartitionSpec, build_groups, pale_token_count
from .tensor import Tensor

__all__ = [
    "MODES",
    "AttentionParams",
    "PaleTransformer",
    "PartitionSpec",
    "Tensor",
    "VariantConfig",
    "attention_forward",
    "build_groups",
    "forward",
    "init_model",
    "init_variant",
    "pale_token_count",
    "variant_config",
]
