"""Per-tensor worker pool.

Work is partitioned across tensors only; reductions inside a tensor and
across tasks keep a fixed order, so results are identical for any worker
count. numpy releases the GIL inside ufunc loops, which is where the time
goes, so threads give real concurrency without copying inputs.
"""

from __future__ import annotations

import os
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

T = TypeVar("T")

_THREADS_ENV = "TENSOR_TIES_THREADS"


def resolve_threads(threads: int | None) -> int:
    """Explicit value, else TENSOR_TIES_THREADS, else available parallelism."""
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get(_THREADS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def map_named(
    fn: Callable[[str], T], names: Sequence[str], threads: int | None = None
) -> dict[str, T]:
    """Apply ``fn`` to each name, returning results keyed in input order."""
    workers = min(resolve_threads(threads), max(1, len(names)))
    if workers <= 1 or len(names) <= 1:
        return {name: fn(name) for name in names}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(fn, names))
    return dict(zip(names, results))
