"""Operation counting for forward passes.

Counting is scoped: ``with counting() as report:`` activates a fresh
:class:`CostReport` for the current context (thread or task), and every
instrumented tensor op executed inside the block increments it. Outside any
``counting`` block the instrumentation is a no-op.
"""
from __future__ import annotations

import contextlib
import contextvars
import enum
from dataclasses import dataclass


class Ordering(str, enum.Enum):
    """Grouping of the three-matrix attention product.

    ``TOKENS_FIRST`` computes ``(Q K^T) V`` (cost grows with N^2),
    ``CHANNELS_FIRST`` computes ``Q (K^T V)`` (cost grows with d^2).
    """

    AUTO = "auto"
    TOKENS_FIRST = "tokens_first"
    CHANNELS_FIRST = "channels_first"
    NOT_APPLICABLE = "n/a"

    def __str__(self):
        return self.value

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"tokensfirst": "tokens_first", "channelsfirst": "channels_first",
                   "tokens": "tokens_first", "channels": "channels_first"}
        key = aliases.get(key, key)
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown ordering {value!r}")


@dataclass
class CostReport:
    exp_ops: int = 0
    mul_adds: int = 0
    ordering_used: Ordering = Ordering.NOT_APPLICABLE


_ACTIVE: contextvars.ContextVar[tuple[CostReport, ...]] = contextvars.ContextVar(
    "sima_cost_reports", default=()
)


@contextlib.contextmanager
def counting(report=None):
    """Activate ``report`` (or a new one) for ops run inside the block.

    Nested blocks all receive increments, so an outer report sees the total.
    """
    report = CostReport() if report is None else report
    token = _ACTIVE.set(_ACTIVE.get() + (report,))
    try:
        yield report
    finally:
        _ACTIVE.reset(token)


def add_exp_ops(n):
    for r in _ACTIVE.get():
        r.exp_ops += int(n)


def add_mul_adds(n):
    for r in _ACTIVE.get():
        r.mul_adds += int(n)


def record_ordering(ordering):
    for r in _ACTIVE.get():
        r.ordering_used = ordering
