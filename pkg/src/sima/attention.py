"""Attention blocks: SimA and its softmax-based baselines.

All head-level functions take ``(..., N, d)`` arrays (tokens along axis -2,
channels along axis -1) so a stack of heads or a batch is handled by one
call. Costs are reported through :mod:`sima.cost`.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import cost, kernels
from .cost import Ordering
from .tensor import ShapeError, matmul, softmax_rows, zeros

DEFAULT_NORM_EPS = 1e-6


class ConfigError(ValueError):
    """An attention or model configuration violates its invariants."""


class Variant(str, enum.Enum):
    SIMA = "sima"
    MSA = "msa"
    XCA = "xca"
    ELU = "elu"

    def __str__(self):
        return self.value

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        key = {"elulinear": "elu", "linear": "elu", "softmax": "msa"}.get(key, key)
        for member in cls:
            if member.value == key:
                return member
        supported = ", ".join(m.value for m in cls)
        raise ValueError(f"unsupported attention variant {value!r} (supported: {supported})")


class Normalization(str, enum.Enum):
    """Column normalization applied to Q and K in SimA."""

    L1 = "l1"
    L2 = "l2"
    NONE = "none"

    def __str__(self):
        return self.value

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown normalization {value!r} (expected l1, l2 or none)")


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int = 1
    variant: Variant = Variant.SIMA
    ordering: Ordering = Ordering.AUTO
    norm_eps: float = DEFAULT_NORM_EPS
    qkv_bias: bool = False
    normalization: Normalization = Normalization.L1

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        object.__setattr__(self, "ordering", Ordering.parse(self.ordering))
        object.__setattr__(self, "normalization", Normalization.parse(self.normalization))
        if self.dim < 1 or self.heads < 1:
            raise ConfigError(f"dim and heads must be positive, got dim={self.dim}, heads={self.heads}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if not self.norm_eps > 0:
            raise ConfigError(f"norm_eps must be > 0, got {self.norm_eps}")
        if self.ordering is Ordering.NOT_APPLICABLE:
            raise ConfigError("ordering policy must be auto, tokens_first or channels_first")

    @property
    def head_dim(self):
        return self.dim // self.heads


@dataclass
class AttentionWeights:
    qkv_w: np.ndarray  # (D, 3D): columns are [query | key | value]
    qkv_b: np.ndarray | None  # (3D,) or None
    proj_w: np.ndarray  # (D, D)
    proj_b: np.ndarray  # (D,)

    @classmethod
    def init(cls, cfg, rng, std=0.02):
        d = cfg.dim
        return cls(
            qkv_w=rng.trunc_normal((d, 3 * d), std),
            qkv_b=zeros((3 * d,)) if cfg.qkv_bias else None,
            proj_w=rng.trunc_normal((d, d), std),
            proj_b=zeros((d,)),
        )

    def check(self, cfg):
        d = cfg.dim
        expected = {"qkv_w": (d, 3 * d), "proj_w": (d, d), "proj_b": (d,)}
        if cfg.qkv_bias:
            expected["qkv_b"] = (3 * d,)
        for name, shape in expected.items():
            value = getattr(self, name)
            if value is None or value.shape != shape:
                got = None if value is None else value.shape
                raise ShapeError(f"{name}: expected shape {shape}, got {got}")
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} has non-finite entries")


# ---------------------------------------------------------------------------
# normalization and ordering


def l1_normalize_columns(m, eps=DEFAULT_NORM_EPS):
    """Divide each column by its l1 norm over the rows (tokens).

    The denominator is clamped at ``eps`` so an all-zero column maps to zeros.
    """
    return kernels.l1_normalize_columns(np.asarray(m), eps)


def l2_normalize_columns(m, eps=DEFAULT_NORM_EPS):
    m = np.asarray(m)
    denom = np.sqrt((m * m).sum(axis=-2, keepdims=True))
    return m / np.maximum(denom, eps)


def normalize_columns(m, normalization=Normalization.L1, eps=DEFAULT_NORM_EPS):
    normalization = Normalization.parse(normalization)
    if normalization is Normalization.L1:
        return l1_normalize_columns(m, eps)
    if normalization is Normalization.L2:
        return l2_normalize_columns(m, eps)
    return np.asarray(m)


def choose_ordering(n_tokens, head_dim):
    """Cheaper grouping of the SimA product: tokens-first iff N < d."""
    if n_tokens < 1 or head_dim < 1:
        raise ValueError(f"need positive sizes, got N={n_tokens}, d={head_dim}")
    return Ordering.TOKENS_FIRST if n_tokens < head_dim else Ordering.CHANNELS_FIRST


def _resolve(ordering, n_tokens, head_dim):
    ordering = Ordering.parse(ordering)
    if ordering is Ordering.AUTO:
        return choose_ordering(n_tokens, head_dim)
    if ordering is Ordering.NOT_APPLICABLE:
        raise ValueError("an explicit product ordering is required")
    return ordering


def _t(a):
    return np.swapaxes(a, -1, -2)


def _check_qkv(q, k, v):
    if q.ndim < 2 or q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"Q, K, V must share one (..., N, d) shape, got {q.shape}, {k.shape}, {v.shape}")


# ---------------------------------------------------------------------------
# head-level forwards


def sima_product(q_hat, k_hat, v, ordering=Ordering.AUTO):
    """``q_hat @ k_hat^T @ v`` grouped per ``ordering``; inputs already normalized."""
    used = _resolve(ordering, q_hat.shape[-2], q_hat.shape[-1])
    if used is Ordering.TOKENS_FIRST:
        out = matmul(matmul(q_hat, _t(k_hat)), v)
    else:
        out = matmul(q_hat, matmul(_t(k_hat), v))
    cost.record_ordering(used)
    return out


def sima_head_forward(q, k, v, ordering=Ordering.AUTO, eps=DEFAULT_NORM_EPS,
                      normalization=Normalization.L1):
    """Softmax-free attention: normalize Q and K per channel, then multiply."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    _check_qkv(q, k, v)
    q_hat = normalize_columns(q, normalization, eps)
    k_hat = normalize_columns(k, normalization, eps)
    return sima_product(q_hat, k_hat, v, ordering)


def msa_head_forward(q, k, v):
    """Scaled dot-product softmax attention."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    _check_qkv(q, k, v)
    scores = matmul(q, _t(k)) * (1.0 / math.sqrt(q.shape[-1]))
    out = matmul(softmax_rows(scores), v)
    cost.record_ordering(Ordering.TOKENS_FIRST)
    return out


def xca_head_forward(q, k, v):
    """Cross-covariance attention ``O = V colsoftmax(K^T Q)``.

    Computed through the transpose: softmax over rows of ``Q^T K`` gives
    ``A^T`` directly, so no column-wise pass is needed.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    _check_qkv(q, k, v)
    attn_t = softmax_rows(matmul(_t(q), k))
    out = matmul(v, _t(attn_t))
    cost.record_ordering(Ordering.CHANNELS_FIRST)
    return out


def elu_feature_map(x):
    """``1 + elu(x)``; one exp counted per negative entry."""
    out, negatives = kernels.elu_feature(np.asarray(x))
    cost.add_exp_ops(negatives)
    return out


def elu_linear_head_forward(q, k, v, ordering=Ordering.AUTO):
    """Kernelized linear attention with feature map ``1 + elu``.

    Row weights are normalized to sum to one. The normalizer reductions are
    plain sums and are not counted as matrix products.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    _check_qkv(q, k, v)
    phi_q = elu_feature_map(q)
    phi_k = elu_feature_map(k)
    used = _resolve(ordering, q.shape[-2], q.shape[-1])
    if used is Ordering.TOKENS_FIRST:
        weights = matmul(phi_q, _t(phi_k))
        num = matmul(weights, v)
        den = weights.sum(axis=-1, keepdims=True)
    else:
        num = matmul(phi_q, matmul(_t(phi_k), v))
        den = (phi_q * phi_k.sum(axis=-2, keepdims=True)).sum(axis=-1, keepdims=True)
    cost.record_ordering(used)
    return num / den


# ---------------------------------------------------------------------------
# full block


def split_heads(x, heads):
    """``(..., N, D)`` -> ``(..., H, N, D/H)``."""
    *lead, n, d = x.shape
    return np.swapaxes(x.reshape(*lead, n, heads, d // heads), -2, -3)


def merge_heads(x):
    """``(..., H, N, d)`` -> ``(..., N, H*d)``."""
    *lead, h, n, d = x.shape
    return np.swapaxes(x, -2, -3).reshape(*lead, n, h * d)


def _heads(variant, q, k, v, cfg):
    if variant is Variant.MSA:
        return msa_head_forward(q, k, v)
    if variant is Variant.XCA:
        return xca_head_forward(q, k, v)
    if variant is Variant.ELU:
        return elu_linear_head_forward(q, k, v, cfg.ordering)
    return sima_product(q, k, v, cfg.ordering)


def attention_forward(x, cfg, w, capture=None):
    """One attention block: fused QKV projection, H heads, output projection.

    ``x`` is ``(N, D)`` or batched ``(..., N, D)``. For SimA the per-channel
    normalization runs once over the fused query/key columns, which is the
    same as normalizing every head separately. When ``capture`` is a dict,
    the normalized query/key stacks (``(..., H, N, d)``) are stored in it
    under ``"q_hat"`` and ``"k_hat"``.
    """
    x = np.asarray(x)
    d = cfg.dim
    if x.ndim < 2 or x.shape[-1] != d:
        raise ShapeError(f"attention_forward: expected (..., N, {d}) input, got {x.shape}")
    qkv = matmul(x, w.qkv_w)
    if w.qkv_b is not None:
        qkv = qkv + w.qkv_b
    if cfg.variant is Variant.SIMA:
        qk = normalize_columns(qkv[..., : 2 * d], cfg.normalization, cfg.norm_eps)
        q, k = qk[..., :d], qk[..., d:]
    else:
        q, k = qkv[..., :d], qkv[..., d : 2 * d]
    v = qkv[..., 2 * d :]
    qh, kh, vh = (split_heads(t, cfg.heads) for t in (q, k, v))
    if capture is not None and cfg.variant is Variant.SIMA:
        capture["q_hat"] = qh
        capture["k_hat"] = kh
    out = merge_heads(_heads(cfg.variant, qh, kh, vh, cfg))
    return matmul(out, w.proj_w) + w.proj_b


def attention_scores(x, cfg, w):
    """Per-head token-token score matrix ``(..., H, N, N)``.

    SimA: ``Q_hat K_hat^T`` (using ``cfg.normalization``); MSA: the
    pre-softmax ``Q K^T / sqrt(d)``. Other variants have no N x N scores.
    """
    x = np.asarray(x)
    d = cfg.dim
    if x.ndim < 2 or x.shape[-1] != d:
        raise ShapeError(f"attention_scores: expected (..., N, {d}) input, got {x.shape}")
    qk = x @ w.qkv_w[:, : 2 * d]
    if w.qkv_b is not None:
        qk = qk + w.qkv_b[: 2 * d]
    if cfg.variant is Variant.SIMA:
        qk = normalize_columns(qk, cfg.normalization, cfg.norm_eps)
        scale = 1.0
    elif cfg.variant is Variant.MSA:
        scale = 1.0 / math.sqrt(cfg.head_dim)
    else:
        raise ConfigError(f"{cfg.variant} has no token-token score matrix")
    q, k = split_heads(qk[..., :d], cfg.heads), split_heads(qk[..., d:], cfg.heads)
    return (q @ _t(k)) * scale


# ---------------------------------------------------------------------------
# closed-form costs


@dataclass(frozen=True)
class ExpOpCount:
    """Transcendental count of one attention forward.

    ``instrumented`` is what the counter reports for a real forward pass
    (per-head softmax sizes); ``nominal`` is the headline whole-width form
    used in the published comparison table. They differ only for XCA.
    For the ELU baseline both hold the data-independent upper bound.
    """

    instrumented: int
    nominal: int


def _check_sizes(n, dim, heads):
    if min(n, dim, heads) < 1:
        raise ConfigError(f"sizes must be positive, got N={n}, D={dim}, H={heads}")
    if dim % heads:
        raise ConfigError(f"dim {dim} is not divisible by heads {heads}")
    return dim // heads


def count_exp_ops(variant, n, dim, heads):
    d = _check_sizes(n, dim, heads)
    variant = Variant.parse(variant)
    if variant is Variant.MSA:
        return ExpOpCount(heads * n * n, heads * n * n)
    if variant is Variant.XCA:
        return ExpOpCount(heads * d * d, heads * dim * dim)
    if variant is Variant.ELU:
        return ExpOpCount(2 * n * dim, 2 * n * dim)
    return ExpOpCount(0, 0)


def inherent_ordering(variant):
    """Product grouping a variant is bound to, or None if it may choose."""
    variant = Variant.parse(variant)
    if variant is Variant.MSA:
        return Ordering.TOKENS_FIRST
    if variant is Variant.XCA:
        return Ordering.CHANNELS_FIRST
    return None


def flops_estimate(variant, n, dim, heads, ordering=Ordering.AUTO):
    """Multiply-adds of the three-matrix attention product (projections excluded).

    MSA and XCA always use their own grouping; ``ordering`` applies to SimA
    and the ELU baseline.
    """
    d = _check_sizes(n, dim, heads)
    used = inherent_ordering(variant) or _resolve(ordering, n, d)
    per_head = 2 * n * n * d if used is Ordering.TOKENS_FIRST else 2 * n * d * d
    return heads * per_head


@dataclass(frozen=True)
class CosformerFactor:
    factor: int
    terms: tuple[str, ...]


def cosformer_flops_factor():
    """Extra product cost of 2-D cosine re-weighting relative to one Q.K product.

    ``cos(i-j) cos(m-n)`` expands into four separable products, each needing
    its own query/key dot product.
    """
    terms = (
        "(Q cos(i) cos(m)) . (K cos(j) cos(n))",
        "(Q cos(i) sin(m)) . (K cos(j) sin(n))",
        "(Q sin(i) cos(m)) . (K sin(j) cos(n))",
        "(Q sin(i) sin(m)) . (K sin(j) sin(n))",
    )
    return CosformerFactor(len(terms), terms)
