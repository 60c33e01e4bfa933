"""Deterministic chunk-parallel execution.

Heavy array work is split into fixed-size chunks whose boundaries depend
only on configuration, never on the worker count.  Each chunk is computed
with the BLAS pool pinned to one thread (multi-threaded GEMM is not
bitwise reproducible for gradient-shaped products), and results are
combined in chunk order.  Consequently any worker count produces
bit-identical results.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

from threadpoolctl import threadpool_limits

_ENV_THREADS = "EYEPRIOR_THREADS"


def default_threads() -> int:
    env = os.environ.get(_ENV_THREADS)
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


@contextmanager
def single_thread_blas():
    with threadpool_limits(limits=1):
        yield


def chunk_slices(n: int, chunk: int):
    """Fixed [start, stop) slices covering range(n)."""
    if chunk <= 0:
        raise ValueError("chunk must be positive")
    return [(i, min(i + chunk, n)) for i in range(0, n, chunk)]


def run_chunks(fn, slices, threads: int):
    """Evaluate fn(start, stop) for every slice; results in slice order.

    With threads > 1 the chunks run on a thread pool; outputs are always
    returned in slice order so downstream reductions are deterministic.
    """
    with single_thread_blas():
        if threads <= 1 or len(slices) <= 1:
            return [fn(a, b) for a, b in slices]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(fn, a, b) for a, b in slices]
            return [f.result() for f in futures]
