from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np
from scipy.stats import qmc

T = TypeVar("T")


def halton_points(n: int, dim: int, seed: int) -> np.ndarray:
    """Scrambled Halton points in the unit cube; identical for identical (n, dim, seed)."""
    if n <= 0:
        return np.empty((0, dim))
    return qmc.Halton(d=dim, scramble=True, seed=seed).random(n)


def map_points(fn: Callable[[np.ndarray], T], points: Sequence[np.ndarray] | np.ndarray, threads: int = 1) -> list[T]:
    """Apply fn to every point, optionally on a thread pool; result order follows the input."""
    if threads <= 1 or len(points) < 2:
        return [fn(p) for p in points]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, points))
