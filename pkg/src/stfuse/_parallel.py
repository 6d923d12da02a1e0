"""Row-block scheduling for the windowed filters.

The row partition is fixed (``BLOCK_ROWS``) and never depends on the worker
count, and every block writes a disjoint output slice, so results are
bit-identical at any thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

BLOCK_ROWS = 32


def default_threads() -> int:
    env = os.environ.get("STFUSE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def row_blocks(height: int, block: int = BLOCK_ROWS) -> list[tuple[int, int]]:
    return [(y, min(y + block, height)) for y in range(0, height, block)]


def run_row_blocks(fn: Callable[[int, int], None], height: int, threads: int | None = 1) -> None:
    blocks = row_blocks(height)
    threads = 1 if threads is None else max(1, int(threads))
    if threads == 1 or len(blocks) == 1:
        for y0, y1 in blocks:
            fn(y0, y1)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for _ in pool.map(lambda b: fn(*b), blocks):
            pass
