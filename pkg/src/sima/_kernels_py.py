"""Numpy implementations of the elementwise attention kernels.

Used when the compiled ``_kernels`` extension is unavailable, and as the
reference the compiled kernels are tested against.
"""
import numpy as np

NAME = "python"


def softmax_rows(x):
    """Softmax over the last axis with max subtraction."""
    x = np.asarray(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def l1_normalize_columns(x, eps):
    """Divide every column (axis -2 runs over rows) by max(sum |x|, eps)."""
    x = np.asarray(x)
    denom = np.abs(x).sum(axis=-2, keepdims=True)
    np.maximum(denom, eps, out=denom)
    return x / denom


def elu_feature(x):
    """Return ``(1 + elu(x), number of negative entries)``."""
    x = np.asarray(x)
    neg = x < 0
    out = np.where(neg, np.exp(np.minimum(x, 0)), x + 1)
    return out.astype(x.dtype, copy=False), int(np.count_nonzero(neg))
