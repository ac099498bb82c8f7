"""Shared-memory worker pool over contiguous chunks of a batch of time points."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np


def chunk_bounds(n: int, workers: int) -> list[tuple[int, int]]:
    """Split ``range(n)`` into at most ``workers`` contiguous, nearly equal chunks."""
    workers = max(1, min(workers, n))
    edges = [(n * k) // workers for k in range(workers + 1)]
    return [(lo, hi) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]


class WorkerPool:
    """Runs a row-wise batch function on chunks of rows, one chunk per worker.

    With one worker everything runs inline.  numpy releases the GIL inside the
    dense products, so threads give real concurrency on multi-core hosts.
    """

    def __init__(self, workers: int = 1):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.workers = workers
        self._executor = ThreadPoolExecutor(workers) if workers > 1 else None

    def map_rows(self, fn, *arrays):
        """Apply ``fn(*chunks)`` and concatenate results along axis 0.

        ``fn`` returns an array or a tuple of arrays, each with one row per input row.
        """
        n = arrays[0].shape[0]
        bounds = chunk_bounds(n, self.workers)
        if self._executor is None or len(bounds) < 2:
            return fn(*arrays)
        futures = [self._executor.submit(fn, *(a[lo:hi] for a in arrays)) for lo, hi in bounds]
        parts = [f.result() for f in futures]
        if isinstance(parts[0], tuple):
            return tuple(np.concatenate(p, axis=0) for p in zip(*parts))
        return np.concatenate(parts, axis=0)

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
