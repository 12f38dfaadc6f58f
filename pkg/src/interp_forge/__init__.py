"""Exact sequence interpolation with hardmax and softmax transformers."""

from .construction import build_hardmax, build_softmax
from .core import (
    Block,
    Dataset,
    Dense,
    FeedForward,
    RankOneSym,
    ScaledIdentity,
    SelfAttention,
    Transformer,
    hausdorff_distance,
    param_count,
    transformer_apply,
    validate_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "Block",
    "Dataset",
    "Dense",
    "FeedForward",
    "RankOneSym",
    "ScaledIdentity",
    "SelfAttention",
    "Transformer",
    "build_hardmax",
    "build_softmax",
    "hausdorff_distance",
    "param_count",
    "transformer_apply",
    "validate_dataset",
]
