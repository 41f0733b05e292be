"""Deterministic worker-pool helpers.

MARROW_THREADS caps the pool everywhere; results are always merged in
submission order, so outputs never depend on the worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def resolve_workers(requested: int | None = None) -> int:
    cap = os.environ.get("MARROW_THREADS")
    limit = None
    if cap:
        try:
            limit = max(1, int(cap))
        except ValueError:
            limit = None
    workers = requested if requested is not None else (os.cpu_count() or 1)
    if limit is not None:
        workers = min(workers, limit)
    return max(1, workers)


def ordered_map(fn: Callable[[T], R], items: Sequence[T],
                workers: int | None = None) -> list[R]:
    """Map preserving input order; sequential when one worker suffices."""
    n = resolve_workers(workers)
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
