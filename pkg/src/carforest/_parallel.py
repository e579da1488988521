"""Thread-pool helper.  Results always come back in input order."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_N_JOBS = os.cpu_count() or 1


def set_n_jobs(n: int | None) -> None:
    global _N_JOBS
    _N_JOBS = max(1, int(n)) if n else (os.cpu_count() or 1)


def get_n_jobs() -> int:
    return _N_JOBS


def parallel_map(fn, items, n_jobs: int | None = None) -> list:
    items = list(items)
    n_jobs = n_jobs or _N_JOBS
    if n_jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, items))
