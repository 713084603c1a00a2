"""Worker-count resolution and a deterministic ordered map.

Results never depend on the worker count: every task writes into its own
pre-assigned slot and callers combine slots in a fixed order.
"""

import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV = "FISHEYE_BEV_THREADS"


def resolve_threads(threads=None) -> int:
    if threads is None:
        threads = os.environ.get(THREADS_ENV) or 1
    threads = int(threads)
    if threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")
    return threads


def ordered_map(fn, items, threads=None) -> list:
    items = list(items)
    n = resolve_threads(threads)
    if n == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
