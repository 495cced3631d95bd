"""Order-preserving parallel map across images."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

ENV_THREADS = "MASKFUSE_THREADS"


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get(ENV_THREADS, "1") or 1)
    return max(1, int(threads))


@contextmanager
def image_pool(threads: int | None = None):
    """Yield a ``map``-compatible callable; results keep input order."""
    n = resolve_threads(threads)
    if n == 1:
        yield lambda fn, items: list(map(fn, items))
        return
    with ThreadPoolExecutor(max_workers=n) as ex:
        yield lambda fn, items: list(ex.map(fn, items))
