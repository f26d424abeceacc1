"""Seeded random streams.

Every random draw in the package comes from a ``numpy.random.Generator``
passed in explicitly.  Experiments derive independent per-replica streams
from one root seed with a counter-based rule:

    SeedSequence(entropy=root_seed, spawn_key=(crc32(stream_name), replica_index))

so replica ``i`` of stream ``"qs/after"`` always sees the same bits, no matter
how many workers run or in which order replicas finish.
"""
from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

import numpy as np

T = TypeVar("T")

SPLIT_RULE = "SeedSequence(entropy=root_seed, spawn_key=(crc32(stream), index))"


def stream_key(stream: str) -> int:
    return zlib.crc32(stream.encode("utf-8"))


def replica_rng(root_seed: int, stream: str, index: int = 0) -> np.random.Generator:
    """Generator for replica ``index`` of the named stream."""
    if root_seed < 0 or root_seed >= 2**64:
        raise ValueError(f"root seed must be an unsigned 64-bit integer, got {root_seed}")
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(stream_key(stream), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def map_replicas(
    fn: Callable[[int], T],
    n: int,
    threads: int = 1,
) -> list[T]:
    """Evaluate ``fn(i)`` for ``i < n``; results are returned in index order."""
    if threads <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))
