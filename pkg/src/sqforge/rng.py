"""Seedable counter-based random streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, tag, index)``. Independent pieces of work (row blocks, trials,
certificate probes) therefore get their own substream and can be produced in
any order or concurrently with identical results.
"""

from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

import numpy as np

T = TypeVar("T")
R = TypeVar("R")

BLOCK_ROWS = 1024


def _tag(tag: str | int) -> int:
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    return int(tag)


def substream(seed: int, tag: str | int, *index: int) -> np.random.Generator:
    """Generator for the substream ``(seed, tag, *index)``."""
    if seed < 0:
        raise ValueError("seeds must be nonnegative")
    ss = np.random.SeedSequence([int(seed), _tag(tag), *map(int, index)])
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, tag: str | int, *index: int) -> int:
    """A 63-bit child seed, for handing to functions that take an int seed."""
    ss = np.random.SeedSequence([int(seed), _tag(tag), *map(int, index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def worker_count() -> int:
    env = os.environ.get("SQFORGE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def pmap(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Order-preserving map over a thread pool capped by ``SQFORGE_THREADS``."""
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))
