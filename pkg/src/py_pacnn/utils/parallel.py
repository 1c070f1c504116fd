"""Worker-pool helpers honoring the PACNN_THREADS limit."""

import os
from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

from loguru import logger

T = TypeVar("T")
R = TypeVar("R")


def worker_count() -> int:
    """Number of worker threads allowed by PACNN_THREADS (defaults to CPU count)."""
    raw = os.getenv("PACNN_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning(f"Ignoring non-integer PACNN_THREADS={raw!r}")
    return os.cpu_count() or 1


def ordered_map(func: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Apply func to every item on the worker pool; results keep input order."""
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [func(item) for item in items]

    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="pacnn") as pool:
        return list(pool.map(func, items))
