"""Order-preserving process-pool map."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

THREADS_ENV = "GRIDSHIELD_THREADS"


def default_jobs() -> int:
    """Worker count from ``GRIDSHIELD_THREADS`` (default 1)."""
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


def pmap(fn, items, n_jobs: int = 1, chunksize: int = 8) -> list:
    """``[fn(x) for x in items]``, optionally across processes; order is kept."""
    items = list(items)
    if n_jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, items, chunksize=chunksize))
