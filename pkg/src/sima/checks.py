"""Randomized invariant suite run by ``sima check``.

Each property draws its inputs from ``Rng(seed).child(property_index, trial)``
so a failure can be replayed from the reported seed, trial and shape.
"""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .attention import (
    AttentionConfig,
    AttentionWeights,
    Variant,
    attention_forward,
    attention_scores,
    count_exp_ops,
    elu_linear_head_forward,
    flops_estimate,
    l1_normalize_columns,
    msa_head_forward,
    sima_head_forward,
    xca_head_forward,
)
from .cost import Ordering, counting
from .model import ModelConfig, classifier_graph, init_params
from .tensor import Rng, precision, softmax_rows

FAULTS = ("softmax-no-renorm",)


@dataclass
class PropertyResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    trials: int
    failure: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        text = f"{status} {self.name:<26} max_err={self.max_error:.3g} tol={self.tolerance:g} trials={self.trials}"
        return text + (f"  [{self.failure}]" if self.failure else "")


@dataclass
class CheckReport:
    results: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self):
        return all(r.passed for r in self.results)


# ---------------------------------------------------------------------------
# individual properties; each returns (error, shape description)


def _qkv(rng, n, d, heads=1):
    shape = (heads, n, d) if heads > 1 else (n, d)
    return rng.normal(shape), rng.normal(shape), rng.normal(shape)


def _draw_nd(rng, sizes):
    return int(rng.integers(1, sizes + 1)), int(rng.integers(1, sizes + 1))


def prop_ordering_equivalence(rng, sizes):
    n, d = _draw_nd(rng, sizes)
    q, k, v = _qkv(rng, n, d)
    a = sima_head_forward(q, k, v, Ordering.TOKENS_FIRST)
    b = sima_head_forward(q, k, v, Ordering.CHANNELS_FIRST)
    return float(np.max(np.abs(a - b))), f"N={n} d={d}"


def prop_attention_bound(rng, sizes):
    n, d = _draw_nd(rng, sizes)
    q, k, _ = _qkv(rng, n, d)
    scores = l1_normalize_columns(q) @ l1_normalize_columns(k).T
    excess = max(0.0, float(np.max(np.abs(scores))) - d)
    # extreme case: one nonzero row in Q and K with the same sign pattern
    signs = np.where(rng.uniform((d,)) < 0.5, -1.0, 1.0)
    qe, ke = np.zeros((n, d)), np.zeros((n, d))
    i, j = int(rng.integers(0, n)), int(rng.integers(0, n))
    qe[i] = signs * (0.5 + rng.uniform((d,)))
    ke[j] = signs * (0.5 + rng.uniform((d,)))
    extreme = (l1_normalize_columns(qe) @ l1_normalize_columns(ke).T)[i, j]
    return max(excess, abs(extreme - d)), f"N={n} d={d}"


def prop_softmax_row_sum(rng, sizes):
    n, m = _draw_nd(rng, sizes)
    x = rng.normal((n, m), 3.0)
    return float(np.max(np.abs(softmax_rows(x).sum(axis=-1) - 1.0))), f"rows={n} cols={m}"


def prop_msa_convexity(rng, sizes):
    n, d = _draw_nd(rng, sizes)
    q, k, v = _qkv(rng, n, d)
    out = msa_head_forward(q, k, v)
    lo, hi = v.min(axis=0), v.max(axis=0)
    excess = np.maximum(lo - out, 0) + np.maximum(out - hi, 0)
    return float(excess.max()), f"N={n} d={d}"


def _head_call(variant, q, k, v, ordering):
    if variant is Variant.SIMA:
        return sima_head_forward(q, k, v, ordering)
    if variant is Variant.MSA:
        return msa_head_forward(q, k, v)
    if variant is Variant.XCA:
        return xca_head_forward(q, k, v)
    return elu_linear_head_forward(q, k, v, ordering)


def _draw_ndh(rng, sizes):
    heads = int(rng.integers(1, 5))
    n, d = _draw_nd(rng, sizes)
    return n, d, heads


def prop_exp_counter(rng, sizes):
    n, d, heads = _draw_ndh(rng, sizes)
    q, k, v = (rng.normal((heads, n, d)) for _ in range(3))
    worst = 0
    for variant in Variant:
        with counting() as report:
            _head_call(variant, q, k, v, Ordering.AUTO)
        if variant is Variant.ELU:
            expected = int((q < 0).sum() + (k < 0).sum())
        else:
            expected = count_exp_ops(variant, n, heads * d, heads).instrumented
        worst = max(worst, abs(report.exp_ops - expected))
    return float(worst), f"N={n} d={d} H={heads}"


def prop_mul_add_counter(rng, sizes):
    n, d, heads = _draw_ndh(rng, sizes)
    q, k, v = (rng.normal((heads, n, d)) for _ in range(3))
    worst = 0
    for variant in Variant:
        for ordering in (Ordering.TOKENS_FIRST, Ordering.CHANNELS_FIRST):
            with counting() as report:
                _head_call(variant, q, k, v, ordering)
            expected = flops_estimate(variant, n, heads * d, heads, ordering)
            worst = max(worst, abs(report.mul_adds - expected))
    return float(worst), f"N={n} d={d} H={heads}"


def prop_permutation(rng, sizes):
    n, d, heads = _draw_ndh(rng, sizes)
    dim = d * heads
    x = rng.normal((n, dim))
    perm = rng.permutation(n)
    worst = 0.0
    for variant in Variant:
        cfg = AttentionConfig(dim, heads, variant)
        w = AttentionWeights.init(cfg, rng.child(int(variant is Variant.MSA)), std=0.3)
        diff = attention_forward(x[perm], cfg, w) - attention_forward(x, cfg, w)[perm]
        worst = max(worst, float(np.max(np.abs(diff))))
    return worst, f"N={n} D={dim} H={heads}"


def prop_scale_invariance(rng, sizes):
    n, d, heads = _draw_ndh(rng, sizes)
    dim = d * heads
    m = rng.normal((n, dim))
    cfg = AttentionConfig(dim, heads, Variant.SIMA)
    w = AttentionWeights.init(cfg, rng, std=0.3)
    base_norm, base_scores = l1_normalize_columns(m), attention_scores(m, cfg, w)
    worst = 0.0
    for c in (1e-3, 1.0, 1e3):
        worst = max(worst, float(np.max(np.abs(l1_normalize_columns(c * m) - base_norm))))
        worst = max(worst, float(np.max(np.abs(attention_scores(c * m, cfg, w) - base_scores))))
    return worst, f"N={n} D={dim} H={heads}"


def _head_node(variant, q, k, v):
    kt = ad.swapaxes(k)
    if variant is Variant.SIMA:
        qh, kh = ad.l1_normalize_columns(q), ad.l1_normalize_columns(k)
        return (qh @ ad.swapaxes(kh)) @ v
    if variant is Variant.MSA:
        return ad.softmax((q @ kt) * (1.0 / math.sqrt(q.shape[-1]))) @ v
    if variant is Variant.XCA:
        return v @ ad.swapaxes(ad.softmax(ad.swapaxes(q) @ k))
    pq, pk = ad.elu_feature(q), ad.elu_feature(k)
    w = pq @ ad.swapaxes(pk)
    return (w @ v) / w.sum(axis=-1, keepdims=True)


def prop_attention_gradient(rng, sizes):
    small = min(sizes, 6)
    n, d = int(rng.integers(1, small + 1)), int(rng.integers(1, small + 1))
    q, k, v = _qkv(rng, n, d)
    probe = rng.normal((n, d))
    worst = 0.0
    for variant in Variant:
        for slot in range(3):
            def f(node, variant=variant, slot=slot):
                args = [ad.constant(q), ad.constant(k), ad.constant(v)]
                args[slot] = node
                return (_head_node(variant, *args) * probe).sum()
            worst = max(worst, ad.grad_check(f, (q, k, v)[slot]))
    return worst, f"N={n} d={d}"


def model_gradient_error(cfg, seed=0, batch=3):
    """Worst relative error of every parameter gradient of a randomized model.

    Parameters are redrawn at unit-ish scale so no gradient is trivially zero
    (the default head initialization is all zeros).
    """
    rng = Rng(seed)
    params = {}
    for i, (name, value) in enumerate(init_params(cfg, rng.child(0)).items()):
        params[name] = rng.child(1, i).normal(value.shape, 0.5) + (1.0 if name.endswith("gain") else 0.0)
    tokens = rng.child(2).normal((batch, cfg.patch_grid ** 2, cfg.d_in))
    labels = np.arange(batch) % cfg.num_classes
    errors = {}
    for name in params:
        def f(node, name=name):
            p = dict(params)
            p[name] = node
            return ad.cross_entropy(classifier_graph(tokens, p, cfg), labels)
        errors[name] = ad.grad_check(f, params[name])
    return errors


def prop_model_gradient(rng, sizes):
    variant = list(Variant)[int(rng.integers(0, len(Variant)))]
    cfg = ModelConfig(depth=1, dim=8, heads=2, patch_grid=2, d_in=4, pooling="cls", variant=variant)
    errors = model_gradient_error(cfg, seed=int(rng.integers(0, 2**31)))
    return max(errors.values()), f"model depth=1 D=8 H=2 N=5 variant={variant}"


# name, function, tolerance, trial cap (None = all trials)
PROPERTIES = [
    ("ordering_equivalence", prop_ordering_equivalence, 1e-10, None),
    ("attention_bound", prop_attention_bound, 1e-12, None),
    ("softmax_row_sum", prop_softmax_row_sum, 1e-12, None),
    ("msa_convexity", prop_msa_convexity, 1e-12, None),
    ("exp_counter_exact", prop_exp_counter, 0.0, None),
    ("mul_add_counter_exact", prop_mul_add_counter, 0.0, None),
    ("permutation_equivariance", prop_permutation, 1e-12, None),
    ("scale_invariance", prop_scale_invariance, 1e-12, None),
    ("attention_gradient", prop_attention_gradient, 1e-4, 10),
    ("model_gradient", prop_model_gradient, 1e-4, 2),
]


def _no_renorm_softmax(x):
    x = np.asarray(x)
    return np.exp(x - x.max(axis=-1, keepdims=True))


@contextlib.contextmanager
def inject_fault(name):
    """Swap in a deliberately broken kernel to prove the suite catches it."""
    if name is None:
        yield
        return
    if name not in FAULTS:
        raise ValueError(f"unknown fault {name!r} (known: {', '.join(FAULTS)})")
    original = kernels.softmax_rows
    kernels.softmax_rows = _no_renorm_softmax
    try:
        yield
    finally:
        kernels.softmax_rows = original


def run_checks(sizes=64, trials=20, seed=0, fault=None, only=None):
    """Run every property ``trials`` times (fewer for the costly gradient ones)."""
    if sizes < 1:
        raise ValueError(f"sizes must be >= 1, got {sizes}")
    if trials < 0:
        raise ValueError(f"trials must be >= 0, got {trials}")
    report = CheckReport()
    if trials == 0:
        report.warnings.append("no trials requested: every property passes vacuously")
    start = time.perf_counter()
    root = Rng(seed)
    with precision(64), inject_fault(fault), np.errstate(all="ignore"):
        for index, (name, fn, tol, cap) in enumerate(PROPERTIES):
            if only is not None and name not in only:
                continue
            count = trials if cap is None else min(trials, cap)
            worst, failure = 0.0, ""
            for t in range(count):
                err, shape = fn(root.child(index, t), sizes)
                if not err <= tol and not failure:
                    failure = f"seed={seed} trial={t} {shape}"
                if not err <= worst:
                    worst = err
            report.results.append(PropertyResult(name, not failure, worst, tol, count, failure))
    report.seconds = time.perf_counter() - start
    return report
