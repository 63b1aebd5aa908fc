from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from app.sampling import halton_points


class Region(Protocol):
    """A compact subset of phase space that can be sampled and measured against."""

    @property
    def dim(self) -> int: ...

    @property
    def is_empty(self) -> bool: ...

    def distance(self, p: np.ndarray) -> np.ndarray: ...

    def sample(self, n: int, seed: int) -> np.ndarray: ...


@dataclass(frozen=True)
class Box:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.lo) != len(self.hi):
            raise ValueError("Box corners must have the same dimension.")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"Degenerate box {self.lo} .. {self.hi}")

    @classmethod
    def square(cls, half: float, dim: int = 2) -> "Box":
        return cls(tuple([-half] * dim), tuple([half] * dim))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def is_empty(self) -> bool:
        return False

    @property
    def lo_array(self) -> np.ndarray:
        return np.asarray(self.lo, dtype=float)

    @property
    def hi_array(self) -> np.ndarray:
        return np.asarray(self.hi, dtype=float)

    @property
    def widths(self) -> np.ndarray:
        return self.hi_array - self.lo_array

    def contains(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.all((p >= self.lo_array) & (p <= self.hi_array), axis=-1)

    def margin(self, p: np.ndarray) -> np.ndarray:
        """Signed distance to the boundary in the sup sense; positive inside."""
        p = np.asarray(p, dtype=float)
        return np.min(np.minimum(p - self.lo_array, self.hi_array - p), axis=-1)

    def distance(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        gap = np.maximum(np.maximum(self.lo_array - p, p - self.hi_array), 0.0)
        return np.linalg.norm(gap, axis=-1)

    def sample(self, n: int, seed: int) -> np.ndarray:
        u = halton_points(n, self.dim, seed)
        return self.lo_array + u * self.widths


@dataclass(frozen=True)
class Annulus:
    """Closed spherical shell r_lo <= |p - center| <= r_hi."""

    center: tuple[float, ...]
    r_lo: float
    r_hi: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.r_lo < self.r_hi:
            raise ValueError("Annulus radii must satisfy 0 <= r_lo < r_hi.")

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def is_empty(self) -> bool:
        return False

    def _radius(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.asarray(p, dtype=float) - np.asarray(self.center), axis=-1)

    def contains(self, p: np.ndarray) -> np.ndarray:
        r = self._radius(p)
        return (r >= self.r_lo) & (r <= self.r_hi)

    def distance(self, p: np.ndarray) -> np.ndarray:
        r = self._radius(p)
        return np.abs(r - np.clip(r, self.r_lo, self.r_hi))

    def sample(self, n: int, seed: int) -> np.ndarray:
        c = np.asarray(self.center, dtype=float)
        if self.dim == 2:
            u = halton_points(n, 2, seed)
            r = np.sqrt(self.r_lo**2 + u[:, 0] * (self.r_hi**2 - self.r_lo**2))
            theta = 2.0 * np.pi * u[:, 1]
            return c + np.column_stack([r * np.cos(theta), r * np.sin(theta)])
        # rejection from the bounding cube
        box = Box(tuple(c - self.r_hi), tuple(c + self.r_hi))
        out = np.empty((0, self.dim))
        m = max(4 * n, 64)
        while len(out) < n:
            cand = box.sample(m, seed)
            out = cand[self.contains(cand)]
            m *= 2
        return out[:n]


@dataclass(frozen=True)
class PointSet:
    """A finite point list; the empty list is the empty compact set."""

    points: tuple[tuple[float, ...], ...] = ()
    dimension: int = 2

    @classmethod
    def empty(cls, dim: int = 2) -> "PointSet":
        return cls((), dim)

    @property
    def dim(self) -> int:
        return self.dimension

    @property
    def is_empty(self) -> bool:
        return len(self.points) == 0

    def as_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float).reshape(-1, self.dimension)

    def contains(self, p: np.ndarray) -> np.ndarray:
        return self.distance(p) == 0.0

    def distance(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        if self.is_empty:
            return np.full(p.shape[:-1], np.inf)
        d = np.linalg.norm(p[..., None, :] - self.as_array(), axis=-1)
        return d.min(axis=-1)

    def sample(self, n: int, seed: int) -> np.ndarray:
        return self.as_array()


@dataclass(frozen=True)
class Neighborhood:
    """Open distance neighborhood {p : dist(p, base) < radius}; plays the role of U_K."""

    base: Box | Annulus | PointSet
    radius: float

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("Neighborhood radius must be positive.")

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def is_empty(self) -> bool:
        return self.base.is_empty

    def contains(self, p: np.ndarray) -> np.ndarray:
        return self.base.distance(p) < self.radius

    def distance(self, p: np.ndarray) -> np.ndarray:
        return np.maximum(self.base.distance(p) - self.radius, 0.0)

    def sample(self, n: int, seed: int) -> np.ndarray:
        """Samples of the closed neighborhood, drawn from its bounding box."""
        if self.is_empty:
            return np.empty((0, self.dim))
        pts = self.base.sample(max(n, 1), seed)
        lo = pts.min(axis=0) - self.radius
        hi = pts.max(axis=0) + self.radius
        box = Box(tuple(lo), tuple(hi))
        out = np.empty((0, self.dim))
        m = max(4 * n, 64)
        for _ in range(8):
            cand = box.sample(m, seed)
            out = cand[self.base.distance(cand) <= self.radius]
            if len(out) >= n:
                break
            m *= 2
        return out[:n]
