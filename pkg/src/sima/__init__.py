"""Softmax-free attention (SimA) and softmax baselines on a small numpy tensor stack."""
from .attention import (
    AttentionConfig,
    AttentionWeights,
    ConfigError,
    Normalization,
    Variant,
    attention_forward,
    attention_scores,
    choose_ordering,
    cosformer_flops_factor,
    count_exp_ops,
    elu_linear_head_forward,
    flops_estimate,
    l1_normalize_columns,
    msa_head_forward,
    sima_head_forward,
    xca_head_forward,
)
from .cost import CostReport, Ordering, counting
from .tensor import Rng, ShapeError, precision, set_precision

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "AttentionWeights",
    "ConfigError",
    "CostReport",
    "Normalization",
    "Ordering",
    "Rng",
    "ShapeError",
    "Variant",
    "attention_forward",
    "attention_scores",
    "choose_ordering",
    "cosformer_flops_factor",
    "count_exp_ops",
    "counting",
    "elu_linear_head_forward",
    "flops_estimate",
    "l1_normalize_columns",
    "msa_head_forward",
    "precision",
    "set_precision",
    "sima_head_forward",
    "xca_head_forward",
]
