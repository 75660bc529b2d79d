"""Reverse-mode automatic differentiation over the library's op set.

Every op returns a :class:`Node` whose value is computed with the
instrumented primitives of :mod:`sima.tensor` (so forward passes through
the graph are costed like the plain-array path). Gradients flow only through
nodes derived from leaves created with ``requires_grad``.

``backward`` is idempotent: each call recomputes all gradients from scratch,
so calling it twice on the same loss yields identical results.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
import math

import numpy as np

from . import cost, kernels
from . import tensor as T


class AutodiffError(RuntimeError):
    """Misuse of the differentiation API (e.g. a non-scalar loss)."""


class NumericError(ArithmeticError):
    """A function evaluation produced a non-finite value."""


_creation = itertools.count()


class Node:
    __slots__ = ("value", "parents", "_backward", "op", "grad", "requires_grad", "index", "name")

    def __init__(self, value, parents=(), backward=None, op="leaf", requires_grad=False, name=None):
        self.value = value
        self.parents = parents
        self._backward = backward
        self.op = op
        self.grad = None
        self.requires_grad = requires_grad
        self.index = next(_creation)
        self.name = name

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def is_leaf(self):
        return not self.parents

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def leaf(value, name=None):
    """Trainable input: gradients are reported for it."""
    return Node(np.asarray(value), requires_grad=True, name=name)


def constant(value):
    if isinstance(value, Node):
        return value
    return Node(np.asarray(value, dtype=T.get_dtype()) if np.isscalar(value) else np.asarray(value))


def _wrap(x):
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents, backward, op):
    if any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), backward, op, requires_grad=True)
    return Node(value, op=op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# graph traversal


class Tape:
    """Non-leaf and leaf nodes reachable from a loss, in creation order.

    Replaying in reverse creation order visits each node after all of its
    consumers, because a consumer is always created after its inputs.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss):
        seen = set()
        stack = [loss]
        nodes = []
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.parents)
        nodes.sort(key=lambda n: n.index)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """Gradients of a scalar ``loss`` with respect to every reachable leaf.

    Returns ``{leaf_node: gradient}``; intermediate nodes also get ``.grad``.
    """
    if not isinstance(loss, Node):
        raise AutodiffError("backward expects a Node")
    if loss.value.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = Tape.from_loss(loss)
    pending = {id(loss): np.ones_like(loss.value)}
    result = {}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.value)
        node.grad = g
        if node.is_leaf:
            result[node] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return result


# ---------------------------------------------------------------------------
# kink monitoring (used by grad_check to skip non-differentiable points)

_KINKS: contextvars.ContextVar[list | None] = contextvars.ContextVar("sima_kinks", default=None)
KINK_BAND = 1e-6


def _note_kink_inputs(x):
    sink = _KINKS.get()
    if sink is not None:
        sink.append(np.where(np.abs(x) < KINK_BAND, 0, np.sign(x)).astype(np.int8))


@contextlib.contextmanager
def _watch_kinks():
    sink = []
    token = _KINKS.set(sink)
    try:
        yield sink
    finally:
        _KINKS.reset(token)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.value + b.value, (a, b), bw, "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.value - b.value, (a, b), bw, "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return _make(a.value * b.value, (a, b), bw, "mul")


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out = a.value / b.value

    def bw(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * out / b.value, b.shape))

    return _make(out, (a, b), bw, "div")


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(T.matmul(a.value, b.value), (a, b), bw, "matmul")


def swapaxes(a, ax1=-1, ax2=-2):
    a = _wrap(a)
    return _make(np.swapaxes(a.value, ax1, ax2), (a,),
                 lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def transpose(a, axes):
    a = _wrap(a)
    inverse = np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,),
                 lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(a, shape):
    a = _wrap(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, idx):
    a = _wrap(a)

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is Ellipsis or p is None or isinstance(p, (slice, int, np.integer)) for p in parts)

    def bw(g):
        full = np.zeros_like(a.value)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.value[idx], (a,), bw, "getitem")


def concat(nodes, axis=0):
    nodes = [_wrap(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([n.value for n in nodes], axis=axis), nodes, bw, "concat")


def split(a, sections, axis=-1):
    """Split into equal parts along ``axis`` (each part is a differentiable slice)."""
    a = _wrap(a)
    size = a.shape[axis] // sections
    axis = axis % a.ndim
    parts = []
    for i in range(sections):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(i * size, (i + 1) * size)
        parts.append(getitem(a, tuple(idx)))
    return parts


def sum_(a, axis=None, keepdims=False):
    a = _wrap(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    count = a.value.size if axis is None else math.prod(
        a.shape[ax] for ax in np.atleast_1d(axis))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# network ops


def relu(a):
    a = _wrap(a)
    _note_kink_inputs(a.value)
    mask = a.value > 0
    return _make(T.relu(a.value), (a,), lambda g: (g * mask,), "relu")


def gelu(a):
    a = _wrap(a)
    x = a.value

    def bw(g):
        c = math.sqrt(2.0 / math.pi)
        t = np.tanh(c * (x + 0.044715 * x * x * x))
        dy = 0.5 * (1 + t) + 0.5 * x * (1 - t * t) * c * (1 + 3 * 0.044715 * x * x)
        return (g * dy,)

    return _make(T.gelu(x), (a,), bw, "gelu")


def softmax(a):
    """Softmax over the last axis."""
    a = _wrap(a)
    y = T.softmax_rows(a.value)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def layer_norm(x, gain, bias, eps=T.LAYER_NORM_EPS):
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    sigma = np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    xhat = centered / sigma
    out = xhat * gain.value + bias.value

    def bw(g):
        gx_hat = g * gain.value
        gx = (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
              - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)) / sigma
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(out, (x, gain, bias), bw, "layer_norm")


def l1_normalize_columns(a, eps=1e-6):
    """Column l1 normalization (axis -2); sign(x) is held constant in backward."""
    a = _wrap(a)
    x = a.value
    _note_kink_inputs(x)
    raw = np.abs(x).sum(axis=-2, keepdims=True)
    clamped = raw < eps
    s = np.maximum(raw, eps)
    y = kernels.l1_normalize_columns(x, eps)

    def bw(g):
        inner = (g * y).sum(axis=-2, keepdims=True)
        gx = g / s - np.where(clamped, 0.0, np.sign(x) * inner / s)
        return (gx,)

    return _make(y, (a,), bw, "l1_normalize")


def l2_normalize_columns(a, eps=1e-6):
    a = _wrap(a)
    x = a.value
    raw = np.sqrt((x * x).sum(axis=-2, keepdims=True))
    clamped = raw < eps
    s = np.maximum(raw, eps)
    y = x / s

    def bw(g):
        inner = (g * y).sum(axis=-2, keepdims=True)
        return (g / s - np.where(clamped, 0.0, y * inner / s),)

    return _make(y, (a,), bw, "l2_normalize")


def elu_feature(a):
    """``1 + elu(x)``; exp counted once per negative entry.

    The curvature jumps at 0, so inputs are reported to the kink monitor.
    """
    a = _wrap(a)
    _note_kink_inputs(a.value)
    y, negatives = kernels.elu_feature(a.value)
    cost.add_exp_ops(negatives)
    slope = np.where(a.value < 0, y, 1.0)
    return _make(y, (a,), lambda g: (g * slope,), "elu_feature")


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of ``(B, C)`` logits against integer labels."""
    logits = _wrap(logits)
    z = logits.value
    labels = np.asarray(labels)
    probs = T.softmax_rows(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(z.shape[0])
    loss = -log_probs[rows, labels].mean()

    def bw(g):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        return (grad * (g / z.shape[0]),)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------------------
# finite-difference checking


def _evaluate(f, x):
    # Extended precision (80-bit long double where the platform has it) keeps
    # the roundoff of the difference quotient far below the tolerances.
    # The numpy kernels are used because they preserve the input dtype.
    with _watch_kinks() as kinks, kernels.use_backend("python"):
        out = f(constant(np.asarray(x, dtype=np.longdouble)))
    value = np.asarray(out.value if isinstance(out, Node) else out).reshape(-1)[0]
    return np.longdouble(value), kinks


def _same_side(a, b):
    return len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b))


def grad_check(f, x, h=1e-5):
    """Worst relative error between the autodiff gradient and central differences.

    ``f`` maps a Node to a scalar Node. Per coordinate the error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``. The stencil
    is evaluated in extended precision, so tiny gradient components are not
    swamped by the roundoff of the difference quotient. Coordinates whose
    +-h stencil moves any kink-monitored input (relu, abs, elu) across or
    within 1e-6 of its kink are skipped.
    """
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    xn = leaf(x)
    out = f(xn)
    analytic = backward(out).get(xn)
    if analytic is None:
        analytic = np.zeros_like(x)
    _, base = _evaluate(f, x)
    worst = 0.0
    for i in np.ndindex(x.shape):
        xp = x.astype(np.longdouble)
        xp[i] += h
        xm = x.astype(np.longdouble)
        xm[i] -= h
        fp, kp = _evaluate(f, xp)
        fm, km = _evaluate(f, xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        if not (_same_side(base, kp) and _same_side(base, km)):
            continue
        numeric = float((fp - fm) / (2 * np.longdouble(h)))
        a = float(analytic[i])
        worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst
