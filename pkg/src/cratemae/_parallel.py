"""Index-ordered parallel map; results never depend on the worker count."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

T = TypeVar("T")


def indexed_map(fn: Callable[[int], T], count: int, threads: int = 1) -> list[T]:
    """``[fn(0), ..., fn(count-1)]`` computed on up to ``threads`` workers."""
    if threads <= 1 or count <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(count)))
