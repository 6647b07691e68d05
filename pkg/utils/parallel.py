"""
Path-parallel execution helpers.

Paths are split into chunks of a fixed size taken from the settings, never
from the worker count, and chunk results are returned in chunk order. Any
computation that is independent per path therefore produces the same bytes
for one worker or many.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

from config.settings import CHUNK_PATHS, DEFAULT_WORKERS

T = TypeVar("T")


def chunk_bounds(total: int, chunk: int = CHUNK_PATHS) -> list[tuple[int, int]]:
    """
    Split ``range(total)`` into consecutive ``[start, stop)`` blocks.

    Args:
        total: Number of paths
        chunk: Block size (must be positive)

    Returns:
        List of (start, stop) pairs covering every index once
    """
    if chunk < 1:
        raise ValueError("chunk size must be positive")
    return [(s, min(s + chunk, total)) for s in range(0, total, chunk)]


def map_chunks(
    fn: Callable[[int, int], T],
    total: int,
    workers: int | None = None,
    chunk: int = CHUNK_PATHS,
) -> list[T]:
    """
    Run ``fn(start, stop)`` over every path chunk and collect results in order.

    Args:
        fn: Function of a chunk's (start, stop) bounds
        total: Number of paths
        workers: Thread count; defaults to the FBSDE_WORKERS setting
        chunk: Block size

    Returns:
        Results of ``fn`` in chunk order
    """
    bounds = chunk_bounds(total, chunk)
    workers = DEFAULT_WORKERS if workers is None else max(1, int(workers))
    if workers == 1 or len(bounds) == 1:
        return [fn(start, stop) for start, stop in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, start, stop) for start, stop in bounds]
        return [f.result() for f in futures]
