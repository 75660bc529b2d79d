"""Wall-clock timing of single attention blocks.

With ``fix_ordering`` every variant multiplies in the same grouping
(tokens-first when N > D, channels-first otherwise), so the per-variant
time difference isolates the normalization/softmax cost. Repetitions are
interleaved across variants so slow drift of the machine affects all of
them equally. Setup (weights, inputs) is never inside the timed region.
"""
from __future__ import annotations

import contextlib
import csv
import gc
import math
import statistics
import time
from dataclasses import dataclass, field, fields

from . import kernels
from .attention import AttentionConfig, AttentionWeights, Variant, attention_forward, inherent_ordering
from .cost import Ordering, counting
from .tensor import Rng, precision

CSV_HEADER = ["variant", "N", "D", "H", "ordering", "mean_ms", "min_ms", "stddev_ms", "exp_ops", "mul_adds"]


class BenchContractError(ValueError):
    pass


@dataclass
class BenchSpec:
    variants: list
    n_values: list
    d_values: list
    heads: int = 8
    repeats: int = 1000
    warmup: int = 50
    fix_ordering: bool = True
    precision: int = 32
    seed: int = 0
    backend: str | None = None

    def __post_init__(self):
        self.variants = [Variant.parse(v) for v in self.variants]
        if self.repeats < 1:
            raise BenchContractError(f"repeats must be >= 1, got {self.repeats}")
        if self.warmup < 0:
            raise BenchContractError(f"warmup must be >= 0, got {self.warmup}")
        if self.precision not in (32, 64):
            raise BenchContractError(f"precision must be 32 or 64, got {self.precision}")
        for n in self.n_values:
            if n < 1:
                raise BenchContractError(f"token counts must be positive, got {n}")
        for d in self.d_values:
            if d < 1 or d % self.heads:
                raise BenchContractError(f"dim {d} must be positive and divisible by heads {self.heads}")


@dataclass
class BenchRecord:
    variant: str
    N: int
    D: int
    H: int
    ordering: str
    mean_ms: float
    min_ms: float
    stddev_ms: float
    exp_ops: int
    mul_adds: int


class BenchRun(list):
    """List of :class:`BenchRecord` with run metadata (backend, clock, warnings)."""

    def __init__(self, records=(), metadata=None):
        super().__init__(records)
        self.metadata = metadata if metadata is not None else {}


def fixed_ordering(n, dim):
    return Ordering.TOKENS_FIRST if n > dim else Ordering.CHANNELS_FIRST


@dataclass
class _Case:
    variant: Variant
    cfg: AttentionConfig
    times_ns: list = field(default_factory=list)


def _timer_warnings(clock_name):
    info = time.get_clock_info(clock_name)
    if not info.monotonic:
        return [f"clock {clock_name} is not monotonic"]
    if info.resolution > 1e-6:
        return [f"timer resolution {info.resolution:g}s is coarser than 1us"]
    return []


def run_bench(spec):
    metadata = {
        "backend": spec.backend or kernels.backend_name(),
        "precision": spec.precision,
        "clock": "perf_counter",
        "warnings": _timer_warnings("perf_counter"),
    }
    backend = kernels.use_backend(spec.backend) if spec.backend else contextlib.nullcontext()
    by_key = {}
    with backend, precision(spec.precision):
        for n in spec.n_values:
            for d in spec.d_values:
                for case in _time_shape(spec, n, d, metadata):
                    by_key[(case[0].variant, n, d)] = case
    records = []
    for variant in spec.variants:
        for n in spec.n_values:
            for d in spec.d_values:
                if (variant, n, d) in by_key:
                    case, report = by_key[(variant, n, d)]
                    records.append(_record(case, n, d, spec.heads, report))
    return BenchRun(records, metadata)


def _time_shape(spec, n, d, metadata):
    rng = Rng(spec.seed).child(n, d)
    x = rng.child(0).normal((n, d))
    ordering = fixed_ordering(n, d) if spec.fix_ordering else Ordering.AUTO
    cases = []
    for variant in spec.variants:
        own = inherent_ordering(variant)
        if spec.fix_ordering and own is not None and own is not ordering:
            metadata["warnings"].append(
                f"skipped {variant} at N={n} D={d}: it cannot use the fixed {ordering} grouping")
            continue
        cfg = AttentionConfig(d, spec.heads, variant, ordering)
        cases.append(_Case(variant, cfg))
    if not cases:
        return []
    # identical weights for every variant: only the attention kernel differs
    weights = AttentionWeights.init(cases[0].cfg, rng.child(1))
    reports = []
    for case in cases:
        with counting() as report:
            attention_forward(x, case.cfg, weights)
        reports.append(report)
        for _ in range(spec.warmup):
            attention_forward(x, case.cfg, weights)
    clock = time.perf_counter_ns
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for rep in range(spec.repeats):
            shift = rep % len(cases)
            for case in cases[shift:] + cases[:shift]:
                t0 = clock()
                attention_forward(x, case.cfg, weights)
                case.times_ns.append(clock() - t0)
    finally:
        if gc_was_enabled:
            gc.enable()
    return list(zip(cases, reports))


def _record(case, n, d, heads, report):
    ms = [t / 1e6 for t in case.times_ns]
    return BenchRecord(
        variant=case.variant.value,
        N=n,
        D=d,
        H=heads,
        ordering=report.ordering_used.value,
        mean_ms=statistics.fmean(ms),
        min_ms=min(ms),
        stddev_ms=statistics.pstdev(ms) if len(ms) > 1 else 0.0,
        exp_ops=report.exp_ops,
        mul_adds=report.mul_adds,
    )


# ---------------------------------------------------------------------------
# output


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def emit_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow([_fmt(getattr(r, name)) for name in CSV_HEADER])


def read_csv(path):
    types = {f.name: f.type for f in fields(BenchRecord)}
    casts = {"str": str, "int": int, "float": float}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise BenchContractError(f"{path}: unexpected header {reader.fieldnames}")
        return [BenchRecord(**{k: casts[types[k]](v) for k, v in row.items()}) for row in reader]


def emit_plotdata(records, path):
    """Write whitespace-delimited ``x y`` series, one per variant and fixed size.

    When only D varies, x is D and the fixed size named in the header is N;
    otherwise x is N with D fixed. Series are separated by a blank line.
    """
    records = list(records)
    if len({r.H for r in records}) > 1:
        raise BenchContractError("plot data needs records that share one head count")
    sweep_d = len({r.N for r in records}) == 1 and len({r.D for r in records}) > 1
    series = {}
    for r in records:
        key = (r.variant, r.N if sweep_d else r.D)
        series.setdefault(key, []).append((r.D if sweep_d else r.N, r.mean_ms))
    blocks = []
    for (variant, fixed), points in series.items():
        fixed_name = "N" if sweep_d else "D"
        lines = [f"# variant={variant} {fixed_name}={fixed} H={records[0].H}"]
        lines += [f"{x} {_fmt(y)}" for x, y in points]
        blocks.append("\n".join(lines))
    with open(path, "w") as fh:
        fh.write("\n\n".join(blocks))
        if blocks:
            fh.write("\n")


def summary_table(records):
    rows = [f"{'variant':<8}{'N':>6}{'D':>6}{'H':>4}  {'ordering':<15}{'mean_ms':>10}{'min_ms':>10}"
            f"{'std_ms':>10}{'exp_ops':>10}{'mul_adds':>12}"]
    for r in records:
        rows.append(f"{r.variant:<8}{r.N:>6}{r.D:>6}{r.H:>4}  {r.ordering:<15}{r.mean_ms:>10.4f}"
                    f"{r.min_ms:>10.4f}{r.stddev_ms:>10.4f}{r.exp_ops:>10}{r.mul_adds:>12}")
    return "\n".join(rows)


def speedup(records, baseline, candidate="sima"):
    """``{(N, D): baseline_mean / candidate_mean}`` for shapes where both ran."""
    means = {(r.variant, r.N, r.D): r.mean_ms for r in records}
    out = {}
    for (v, n, d), m in means.items():
        if v == str(baseline) and (candidate, n, d) in means:
            out[(n, d)] = m / means[(candidate, n, d)] if means[(candidate, n, d)] > 0 else math.inf
    return out
