"""Toy transformer classifier built on the attention variants.

Parameters live in a flat ``{name: array}`` dict. The forward pass is
written once, against :mod:`sima.autodiff` nodes; the array-level entry
points (``ffn_forward``, ``block_forward``, ``classifier_forward``) wrap
their inputs as constants and return plain arrays.
"""
from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import cost
from .attention import AttentionConfig, ConfigError, Normalization, Variant, _resolve
from .cost import Ordering
from .tensor import LAYER_NORM_EPS, Rng, ShapeError, get_dtype

log = logging.getLogger(__name__)


class Activation(str, enum.Enum):
    GELU = "gelu"
    RELU = "relu"

    def __str__(self):
        return self.value


class Pooling(str, enum.Enum):
    MEAN = "mean"
    CLS = "cls"

    def __str__(self):
        return self.value


class TrainingDiverged(RuntimeError):
    """Non-finite loss; ``trace`` holds the rows recorded before ``step``."""

    def __init__(self, step, loss, trace=()):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss
        self.trace = list(trace)


class CheckpointError(ValueError):
    """A checkpoint file is missing fields or malformed."""


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    dim: int = 32
    heads: int = 4
    ffn_ratio: int = 4
    activation: Activation = Activation.GELU
    variant: Variant = Variant.SIMA
    pooling: Pooling = Pooling.MEAN
    normalization: Normalization = Normalization.L1
    patch_grid: int = 4
    d_in: int = 16
    num_classes: int = 2
    qkv_bias: bool = False
    ordering: Ordering = Ordering.AUTO
    norm_eps: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(str(self.activation).lower()))
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        object.__setattr__(self, "pooling", Pooling(str(self.pooling).lower()))
        object.__setattr__(self, "normalization", Normalization.parse(self.normalization))
        object.__setattr__(self, "ordering", Ordering.parse(self.ordering))
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.ffn_ratio < 1:
            raise ConfigError(f"ffn_ratio must be >= 1, got {self.ffn_ratio}")
        if min(self.patch_grid, self.d_in, self.num_classes) < 1:
            raise ConfigError("patch_grid, d_in and num_classes must be positive")
        self.attention  # validates dim/heads

    @property
    def attention(self):
        return AttentionConfig(self.dim, self.heads, self.variant, self.ordering,
                               self.norm_eps, self.qkv_bias, self.normalization)

    @property
    def n_tokens(self):
        return self.patch_grid ** 2 + (1 if self.pooling is Pooling.CLS else 0)

    def to_dict(self):
        return {k: (v.value if isinstance(v, enum.Enum) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg, rng, std=0.02):
    """Truncated-normal projections, zero biases, unit LayerNorm gains, zero head."""
    dtype = get_dtype()
    d, hidden = cfg.dim, cfg.dim * cfg.ffn_ratio
    p = {
        "embed.w": rng.trunc_normal((cfg.d_in, d), std),
        "embed.b": np.zeros(d, dtype),
    }
    if cfg.pooling is Pooling.CLS:
        p["cls_token"] = rng.trunc_normal((1, d), std)
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        p[b + "norm1.gain"] = np.ones(d, dtype)
        p[b + "norm1.bias"] = np.zeros(d, dtype)
        p[b + "attn.qkv.w"] = rng.trunc_normal((d, 3 * d), std)
        if cfg.qkv_bias:
            p[b + "attn.qkv.b"] = np.zeros(3 * d, dtype)
        p[b + "attn.proj.w"] = rng.trunc_normal((d, d), std)
        p[b + "attn.proj.b"] = np.zeros(d, dtype)
        p[b + "norm2.gain"] = np.ones(d, dtype)
        p[b + "norm2.bias"] = np.zeros(d, dtype)
        p[b + "ffn.fc1.w"] = rng.trunc_normal((d, hidden), std)
        p[b + "ffn.fc1.b"] = np.zeros(hidden, dtype)
        p[b + "ffn.fc2.w"] = rng.trunc_normal((hidden, d), std)
        p[b + "ffn.fc2.b"] = np.zeros(d, dtype)
    p["norm.gain"] = np.ones(d, dtype)
    p["norm.bias"] = np.zeros(d, dtype)
    p["head.w"] = np.zeros((d, cfg.num_classes), dtype)
    p["head.b"] = np.zeros(cfg.num_classes, dtype)
    return p


def block_params(params, index):
    """The parameters of block ``index`` with the ``blocks.i.`` prefix removed."""
    prefix = f"blocks.{index}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# graph construction


def _activate(x, activation):
    return ad.relu(x) if activation is Activation.RELU else ad.gelu(x)


def _ffn(x, p, activation):
    h = _activate(x @ p["ffn.fc1.w"] + p["ffn.fc1.b"], activation)
    return h @ p["ffn.fc2.w"] + p["ffn.fc2.b"]


def _split_heads(x, heads):
    *lead, n, d = x.shape
    return ad.swapaxes(x.reshape(tuple(lead) + (n, heads, d // heads)), -2, -3)


def _merge_heads(x):
    *lead, h, n, d = x.shape
    return ad.swapaxes(x, -2, -3).reshape(tuple(lead) + (n, h * d))


def _normalize(x, normalization, eps):
    if normalization is Normalization.L1:
        return ad.l1_normalize_columns(x, eps)
    if normalization is Normalization.L2:
        return ad.l2_normalize_columns(x, eps)
    return x


def _attention(x, p, acfg, capture=None):
    d, heads = acfg.dim, acfg.heads
    qkv = x @ p["attn.qkv.w"]
    if "attn.qkv.b" in p:
        qkv = qkv + p["attn.qkv.b"]
    if acfg.variant is Variant.SIMA:
        qk = _normalize(qkv[..., : 2 * d], acfg.normalization, acfg.norm_eps)
        q, k = qk[..., :d], qk[..., d:]
    else:
        q, k = qkv[..., :d], qkv[..., d : 2 * d]
    v = qkv[..., 2 * d :]
    q, k, v = (_split_heads(t, heads) for t in (q, k, v))
    if capture is not None:
        capture.append({"q_hat": q.value, "k_hat": k.value})
    n, hd = q.shape[-2], q.shape[-1]
    kt = ad.swapaxes(k)
    if acfg.variant is Variant.SIMA:
        used = _resolve(acfg.ordering, n, hd)
        out = (q @ kt) @ v if used is Ordering.TOKENS_FIRST else q @ (kt @ v)
    elif acfg.variant is Variant.MSA:
        used = Ordering.TOKENS_FIRST
        out = ad.softmax((q @ kt) * (1.0 / math.sqrt(hd))) @ v
    elif acfg.variant is Variant.XCA:
        used = Ordering.CHANNELS_FIRST
        out = v @ ad.swapaxes(ad.softmax(ad.swapaxes(q) @ k))
    else:
        used = _resolve(acfg.ordering, n, hd)
        phi_q, phi_k = ad.elu_feature(q), ad.elu_feature(k)
        if used is Ordering.TOKENS_FIRST:
            weights = phi_q @ ad.swapaxes(phi_k)
            out = (weights @ v) / weights.sum(axis=-1, keepdims=True)
        else:
            den = (phi_q * phi_k.sum(axis=-2, keepdims=True)).sum(axis=-1, keepdims=True)
            out = (phi_q @ (ad.swapaxes(phi_k) @ v)) / den
    cost.record_ordering(used)
    return _merge_heads(out) @ p["attn.proj.w"] + p["attn.proj.b"]


def _block(x, p, cfg, capture=None):
    h = ad.layer_norm(x, p["norm1.gain"], p["norm1.bias"], LAYER_NORM_EPS)
    x = x + _attention(h, p, cfg.attention, capture)
    h = ad.layer_norm(x, p["norm2.gain"], p["norm2.bias"], LAYER_NORM_EPS)
    return x + _ffn(h, p, cfg.activation)


def classifier_graph(tokens, params, cfg, capture=None):
    """Logits node for ``(..., patch_grid**2, d_in)`` tokens.

    A single ``(patch_grid**2, d_in)`` sample gives ``(num_classes,)`` logits.

    ``params`` maps names to nodes (or arrays). When ``capture`` is a list,
    one ``{"q_hat", "k_hat"}`` dict per block is appended to it.
    """
    tokens = ad.constant(tokens)
    expected = cfg.patch_grid ** 2
    if tokens.ndim < 2 or tokens.shape[-2:] != (expected, cfg.d_in):
        raise ShapeError(
            f"expected (..., {expected}, {cfg.d_in}) tokens for a {cfg.patch_grid}x{cfg.patch_grid} grid, "
            f"got {tokens.shape}")
    single = tokens.ndim == 2
    p = {k: ad._wrap(v) for k, v in params.items()}
    x = tokens @ p["embed.w"] + p["embed.b"]
    if cfg.pooling is Pooling.CLS:
        lead = tokens.shape[:-2]
        cls = ad.constant(np.zeros(lead + (1, cfg.dim), x.value.dtype)) + p["cls_token"]
        x = ad.concat([cls, x], axis=-2)
    for i in range(cfg.depth):
        prefix = f"blocks.{i}."
        bp = {k[len(prefix):]: v for k, v in p.items() if k.startswith(prefix)}
        x = _block(x, bp, cfg, capture)
    x = ad.layer_norm(x, p["norm.gain"], p["norm.bias"], LAYER_NORM_EPS)
    pooled = x[..., 0, :] if cfg.pooling is Pooling.CLS else x.mean(axis=-2)
    if single:
        return (pooled.reshape(1, cfg.dim) @ p["head.w"] + p["head.b"])[0]
    return pooled @ p["head.w"] + p["head.b"]


# ---------------------------------------------------------------------------
# array-level entry points


def ffn_forward(x, w1, b1, w2, b2, activation=Activation.GELU):
    x = np.asarray(x)
    if x.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0] or w2.shape[1] != x.shape[-1]:
        raise ShapeError(f"ffn: incompatible shapes x={x.shape}, w1={w1.shape}, w2={w2.shape}")
    p = {"ffn.fc1.w": w1, "ffn.fc1.b": b1, "ffn.fc2.w": w2, "ffn.fc2.b": b2}
    p = {k: ad.constant(v) for k, v in p.items()}
    return _ffn(ad.constant(x), p, Activation(str(activation).lower())).value


def block_forward(x, params, cfg):
    """One pre-norm transformer block; ``params`` uses block-local names."""
    x = np.asarray(x)
    if x.shape[-1] != cfg.dim:
        raise ShapeError(f"block_forward: expected {cfg.dim} channels, got {x.shape}")
    p = {k: ad.constant(v) for k, v in params.items()}
    return _block(ad.constant(x), p, cfg).value


def classifier_forward(tokens, cfg, params, capture=None):
    return classifier_graph(tokens, params, cfg, capture).value


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    tokens: np.ndarray  # (count, patch_grid**2, d_in)
    labels: np.ndarray  # (count,) int
    direction: np.ndarray  # (d_in,) unit signal direction
    patch_grid: int

    def __len__(self):
        return len(self.labels)


def make_synthetic_dataset(rng, count, patch_grid, d_in, signal_strength, signal_fraction=0.25):
    """Balanced two-class token sets.

    Every token is standard normal noise; in class-1 samples a random
    ``signal_fraction`` of the patches also carry ``signal_strength`` times a
    fixed unit direction. Sample ``i`` draws from its own stream
    ``rng.child(1, i)``, so samples can be generated independently.
    """
    if signal_strength < 0:
        raise ValueError(f"signal_strength must be >= 0, got {signal_strength}")
    n = patch_grid ** 2
    k = max(1, round(n * signal_fraction))
    direction = rng.child(0).normal((d_in,)).astype(np.float64)
    direction /= np.linalg.norm(direction)
    labels = np.arange(count) % 2
    tokens = np.empty((count, n, d_in), dtype=get_dtype())
    for i in range(count):
        sample_rng = rng.child(1, i)
        x = sample_rng.normal((n, d_in)).astype(np.float64)
        if labels[i]:
            x[sample_rng.choice(n, k)] += signal_strength * direction
        tokens[i] = x
    return Dataset(tokens, labels, direction.astype(get_dtype()), patch_grid)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int
    rng: Rng


@dataclass
class TraceRow:
    step: int
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    trace: list = field(default_factory=list)
    state: TrainState | None = None
    final_accuracy: float = float("nan")


def evaluate(params, cfg, dataset, chunk=256):
    """Accuracy of ``params`` on the whole dataset."""
    correct = 0
    for start in range(0, len(dataset), chunk):
        logits = classifier_forward(dataset.tokens[start:start + chunk], cfg, params)
        correct += int((logits.argmax(axis=-1) == dataset.labels[start:start + chunk]).sum())
    return correct / max(len(dataset), 1)


def loss_and_grads(params, cfg, tokens, labels):
    leaves = {k: ad.leaf(v, name=k) for k, v in params.items()}
    logits = classifier_graph(tokens, leaves, cfg)
    loss = ad.cross_entropy(logits, labels)
    grads = ad.backward(loss)
    return loss.value.item(), logits.value, {k: grads[n] for k, n in leaves.items()}


def train_toy(cfg, dataset, steps, lr, batch_size=64, seed=0,
              betas=(0.9, 0.999), adam_eps=1e-8):
    """Adam on softmax cross-entropy; deterministic given ``seed``.

    ``batch_size=None`` trains on the full dataset every step. Raises
    :class:`TrainingDiverged` on a non-finite loss.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    root = Rng(seed)
    params = init_params(cfg, root.child(0))
    state = TrainState(params, {k: np.zeros_like(v) for k, v in params.items()},
                       {k: np.zeros_like(v) for k, v in params.items()}, 0, root.child(1))
    b1, b2 = betas
    n = len(dataset)
    result = TrainResult(state=state)
    for step in range(1, steps + 1):
        if batch_size is None or batch_size >= n:
            idx = np.arange(n)
        else:
            idx = np.sort(state.rng.choice(n, batch_size))
        x, y = dataset.tokens[idx], dataset.labels[idx]
        with np.errstate(over="ignore", invalid="ignore"):
            loss, logits, grads = loss_and_grads(state.params, cfg, x, y)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss, result.trace)
        acc = float((logits.argmax(axis=-1) == y).mean())
        result.trace.append(TraceRow(step, loss, acc))
        state.step = step
        for k, g in grads.items():
            state.m[k] = b1 * state.m[k] + (1 - b1) * g
            state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
            m_hat = state.m[k] / (1 - b1 ** step)
            v_hat = state.v[k] / (1 - b2 ** step)
            state.params[k] = state.params[k] - lr * m_hat / (np.sqrt(v_hat) + adam_eps)
        if step % 100 == 0:
            log.info("step %d loss %.4f acc %.3f", step, loss, acc)
    with np.errstate(over="ignore", invalid="ignore"):
        result.final_accuracy = evaluate(state.params, cfg, dataset)
    return result


# ---------------------------------------------------------------------------
# files


def save_checkpoint(path, params, cfg):
    """Write an ``.npz`` archive: one array per parameter plus ``__config__`` (JSON)."""
    arrays = dict(params)
    arrays["__config__"] = np.array(json.dumps(cfg.to_dict()))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as data:
        if "__config__" not in data.files:
            raise CheckpointError(f"{path}: missing __config__ entry")
        try:
            cfg = ModelConfig.from_dict(json.loads(str(data["__config__"])))
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: bad config: {exc}") from exc
        params = {k: data[k] for k in data.files if k != "__config__"}
    expected = init_params(cfg, Rng(0))
    for name, value in expected.items():
        if name not in params or params[name].shape != value.shape:
            raise CheckpointError(f"{path}: parameter {name!r} missing or misshapen")
    return cfg, params


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "accuracy"])
        for row in trace:
            writer.writerow([row.step, f"{row.loss:.6g}", f"{row.accuracy:.6g}"])
