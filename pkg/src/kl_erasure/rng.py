"""Reproducible parallel random streams.

Stream ``i`` of seed ``s`` is a Philox counter-based generator keyed by
``SeedSequence(s, spawn_key=(i,))``. Monte Carlo work is cut into chunks of
fixed size and chunk ``c`` always consumes stream ``c``, so results depend on
the seed and sample count only, never on the number of worker threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK_SIZE = 8192


def stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def chunk_sizes(n: int, chunk: int = CHUNK_SIZE) -> list[int]:
    full, rest = divmod(n, chunk)
    return [chunk] * full + ([rest] if rest else [])


def map_chunks(fn, n: int, seed: int, threads: int = 1, chunk: int = CHUNK_SIZE) -> list:
    """Run ``fn(size, rng)`` over the chunks of ``n`` draws, results in chunk order."""
    sizes = chunk_sizes(n, chunk)
    jobs = [(size, stream(seed, i)) for i, size in enumerate(sizes)]
    if threads <= 1 or len(jobs) <= 1:
        return [fn(size, rng) for size, rng in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))
