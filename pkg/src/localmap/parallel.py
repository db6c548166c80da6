"""Deterministic fork-join execution for data-parallel stage sections.

Work is split into fixed-size chunks whose boundaries never depend on the
worker count, and partial results are combined in submission order, so a
stage's output is bit-identical whether it runs on 1 thread or many. This
is the artifact's stand-in for a GPU thread grid.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable


def chunk_ranges(n: int, chunk_size: int) -> list[tuple[int, int]]:
    """Fixed [start, stop) partition of range(n); independent of worker count."""
    if n <= 0:
        return []
    size = max(1, int(chunk_size))
    return [(s, min(s + size, n)) for s in range(0, n, size)]


def expand_ranges(starts, stops):
    """CSR-style expansion of per-row index ranges into flat pair arrays.

    Returns (row_idx, flat_idx): for each row r, flat_idx covers
    range(starts[r], stops[r]). Fully vectorized; empty rows drop out.
    """
    import numpy as np

    counts = np.maximum(stops - starts, 0)
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    row_idx = np.repeat(np.arange(len(starts), dtype=np.int64), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    flat_idx = np.arange(total, dtype=np.int64) - offsets[row_idx] + starts[row_idx]
    return row_idx, flat_idx


class WorkerPool:
    """Ordered map over tasks, threaded when workers > 1."""

    def __init__(self, workers: int = 1):
        self.workers = max(1, int(workers))
        self._pool = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None

    def map(self, fn: Callable, items: Iterable) -> list:
        if self._pool is None:
            return [fn(item) for item in items]
        return list(self._pool.map(fn, items))

    def map_chunks(self, fn: Callable[[int, int], object], n: int, chunk_size: int) -> list:
        """Apply fn(start, stop) to each fixed chunk, results in chunk order."""
        ranges = chunk_ranges(n, chunk_size)
        if self._pool is None:
            return [fn(s, e) for s, e in ranges]
        return list(self._pool.map(lambda r: fn(r[0], r[1]), ranges))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


SERIAL = WorkerPool(1)
