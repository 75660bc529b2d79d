"""Dense tensor primitives.

Tensors are plain C-ordered numpy arrays. Every op here is a pure function
of its inputs; the ones that cost multiply-adds or transcendental
evaluations report them to the active :mod:`sima.cost` counter.
Leading (batch) axes are carried through where noted.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from . import cost, kernels

Tensor = np.ndarray

LAYER_NORM_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)

_dtype = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


def set_precision(bits):
    """Select the build-wide float width (64 by default, 32 for benchmarks)."""
    global _dtype
    if bits == 64:
        _dtype = np.float64
    elif bits == 32:
        _dtype = np.float32
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits!r}")


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(bits):
    previous = 64 if _dtype == np.float64 else 32
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


def tensor(data, dtype=None):
    """Build a tensor of the active precision from nested lists or arrays."""
    return np.array(data, dtype=dtype or _dtype)


def zeros(shape):
    return np.zeros(shape, dtype=_dtype)


def ones(shape):
    return np.ones(shape, dtype=_dtype)


class Rng:
    """Seeded random source.

    Backed by PCG64, whose streams are specified bit-for-bit, so equal seeds
    give equal samples on every platform. Samples are drawn in float64 and
    cast to the active precision.
    """

    def __init__(self, seed, _key=()):
        self.seed = int(seed)
        self._key = tuple(_key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self._key})"

    def child(self, *key):
        """Independent stream derived from (seed, key); unaffected by draws on self."""
        return Rng(self.seed, self._key + tuple(int(k) for k in key))

    def normal(self, shape, std=1.0):
        return (self._gen.standard_normal(shape) * std).astype(_dtype)

    def uniform(self, shape, low=0.0, high=1.0):
        return self._gen.uniform(low, high, shape).astype(_dtype)

    def trunc_normal(self, shape, std=1.0, bound=2.0):
        """Normal samples redrawn until they fall inside +-bound standard deviations."""
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return (out * std).astype(_dtype)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False):
        return self._gen.choice(n, size=size, replace=replace)


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast.

    Adds ``batch * m * n * k`` to the multiply-add counter.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(a, b)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    batch = math.prod(out.shape[:-2])
    cost.add_mul_adds(batch * m * n * k)
    return out


def transpose(a):
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a rank-2 tensor, got shape {a.shape}")
    return np.ascontiguousarray(a.T)


def softmax_rows(a):
    """Row-wise softmax (last axis). One exp is counted per entry."""
    a = np.asarray(a)
    out = kernels.softmax_rows(a)
    cost.add_exp_ops(a.size)
    return out


def gelu(a):
    """Tanh-approximated GELU. One transcendental counted per entry."""
    a = np.asarray(a)
    out = 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + 0.044715 * a * a * a)))
    cost.add_exp_ops(a.size)
    return out


def relu(a):
    return np.maximum(np.asarray(a), 0)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Standardize each row (last axis) and apply the affine gain/bias."""
    x = np.asarray(x)
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias
