from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _e(u: np.ndarray) -> np.ndarray:
    # exp(-1/u) for u > 0, else 0
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-1.0 / u[pos])
    return out


def _de(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-1.0 / u[pos]) / u[pos] ** 2
    return out


@dataclass(frozen=True)
class SmoothStep:
    """C-infinity monotone step from 0 (t <= lo) to 1 (t >= hi).

    Built as e(u) / (e(u) + e(1 - u)) with u = (t - lo) / (hi - lo) and
    e(u) = exp(-1/u); every derivative vanishes at lo and hi.
    """

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValueError(f"SmoothStep needs lo < hi, got {self.lo} >= {self.hi}")

    def _u(self, t):
        return (np.asarray(t, dtype=float) - self.lo) / (self.hi - self.lo)

    def __call__(self, t):
        u = self._u(t)
        a, b = _e(u), _e(1.0 - u)
        val = a / (a + b)
        return float(val) if np.ndim(val) == 0 else val

    def derivative(self, t):
        u = self._u(t)
        a, b = _e(u), _e(1.0 - u)
        da, db = _de(u), _de(1.0 - u)
        val = (da * b + a * db) / (a + b) ** 2 / (self.hi - self.lo)
        return float(val) if np.ndim(val) == 0 else val


def smoothstep(s: SmoothStep, t: float) -> float:
    return s(t)


@dataclass(frozen=True)
class RadialBump:
    """1 on |d| <= inner, 0 on |d| >= outer, smooth and monotone in |d| between."""

    inner: float
    outer: float

    def __call__(self, d):
        return 1.0 - SmoothStep(self.inner, self.outer)(np.abs(d))
