"""Thread-parallel map with deterministic, input-ordered results.

Worker count is capped by the DOWNGEN_THREADS environment variable (0 or
unset: min(4, cpu count)). Results are bit-identical to the sequential
schedule because tasks are pure and outputs are collected in input order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count():
    env = os.environ.get("DOWNGEN_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ValueError(f"DOWNGEN_THREADS must be an integer, got {env!r}") from exc
        if n > 0:
            return n
    return min(4, os.cpu_count() or 1)


def pmap(fn, items):
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
