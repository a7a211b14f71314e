"""Order-preserving parallel map.

Every job carries its own derived seed, so results do not depend on the
number of workers or on scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def default_threads() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1


def parallel_map(fn, items, threads: int | None = 1):
    items = list(items)
    threads = default_threads() if threads is None or threads <= 0 else threads
    if threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    chunksize = max(1, len(items) // (threads * 4))
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))
