"""Multiply-accumulate instrumentation for attention-like kernels.

Counting is off unless a :func:`counting` context is active, so the kernels
stay pure in normal use. Counters are per-context (``contextvars``), which
keeps concurrent callers from seeing each other's numbers.
"""

from __future__ import annotations

import contextlib
import contextvars
from collections import Counter
from typing import Iterator

_active: contextvars.ContextVar[Counter | None] = contextvars.ContextVar("drt_opcount", default=None)


def add(kind: str, macs: int) -> None:
    counter = _active.get()
    if counter is not None:
        counter[kind] += int(macs)


def enabled() -> bool:
    return _active.get() is not None


@contextlib.contextmanager
def counting() -> Iterator[Counter]:
    """Collect MAC counts by category for everything run inside the block.

    Categories used by the model:
      ``retrieval`` - chunk-to-landmark relevance scores (one dot product of
      length d per scored pair),
      ``gca`` - grouped cross-attention (QK^T plus PV, per query/key pair),
      ``self_attn`` - decoder sliding-window attention (QK^T plus PV, only
      the in-window pairs),
      ``encoder`` - bidirectional in-chunk encoder attention.
    """
    counter: Counter = Counter()
    token = _active.set(counter)
    try:
        yield counter
    finally:
        _active.reset(token)
