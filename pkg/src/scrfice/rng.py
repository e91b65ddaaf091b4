"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, *path)`` through
:class:`numpy.random.SeedSequence`, so the draws for block ``b`` of a cohort
depend only on the master seed and ``b`` -- never on how many workers ran or
in which order the blocks were produced.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

#: Subjects per block. Fixed so output is independent of worker count.
BLOCK_SIZE = 1 << 16

T = TypeVar("T")


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def stream(seed: int, *path) -> np.random.Generator:
    """Return the generator for ``path`` under master ``seed``.

    ``path`` items may be strings (hashed to a stable 32-bit key) or
    non-negative integers such as block or replicate indices.
    """
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def blocks(n: int, block_size: int = BLOCK_SIZE) -> list[tuple[int, int]]:
    """Half-open ``(start, stop)`` index ranges covering ``range(n)``."""
    return [(s, min(s + block_size, n)) for s in range(0, n, block_size)]


def resolve_threads(threads: int) -> int:
    if threads < 0:
        raise ValueError("threads must be >= 0")
    if threads == 0:
        import os

        return max(1, os.cpu_count() or 1)
    return threads


def map_ordered(fn: Callable[..., T], items: Sequence, threads: int = 1) -> list[T]:
    """``[fn(item) for item in items]``, optionally on a thread pool.

    Results come back in input order, so reductions over them are
    deterministic regardless of ``threads``.
    """
    threads = resolve_threads(threads)
    if threads == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
