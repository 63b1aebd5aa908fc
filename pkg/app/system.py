from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from app.bumps import SmoothStep
from app.errors import AdmissionError
from app.regions import Box, Neighborhood

logger = logging.getLogger(__name__)

Flow = Callable[[float, np.ndarray], np.ndarray]

# (coefficient, exponents) ; exponents has one entry per coordinate
Term = tuple[float, tuple[int, ...]]

DEFAULT_DOMAIN = Box.square(3.0)


@dataclass(frozen=True)
class VectorField:
    """X: U -> R^n. `func` accepts arrays of shape (..., n)."""

    name: str
    func: Callable[[np.ndarray], np.ndarray]
    domain: Box
    regularity: int | None = None  # None means C-infinity
    closed_form_flow: Flow | None = None

    @property
    def dim(self) -> int:
        return self.domain.dim

    def __call__(self, p: np.ndarray) -> np.ndarray:
        return self.func(np.asarray(p, dtype=float))

    def with_domain(self, domain: Box) -> "VectorField":
        return replace(self, domain=domain)


@dataclass(frozen=True)
class ScalarField:
    name: str
    func: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, p: np.ndarray):
        return self.func(np.asarray(p, dtype=float))

    @classmethod
    def constant(cls, value: float) -> "ScalarField":
        return cls(
            f"const({value:g})",
            lambda p: np.full(np.shape(p)[:-1], float(value)) if np.ndim(p) > 1 else float(value),
            lambda p: np.zeros_like(np.asarray(p, dtype=float)),
        )


# ---------------------------------------------------------------- polynomials

def _monomials(p: np.ndarray, terms: Sequence[Term]) -> np.ndarray:
    out = np.zeros(p.shape[:-1])
    for coef, exps in terms:
        mono = np.full(p.shape[:-1], float(coef))
        for i, e in enumerate(exps):
            if e:
                mono = mono * p[..., i] ** e
        out = out + mono
    return out


def _monomial_gradient(p: np.ndarray, terms: Sequence[Term]) -> np.ndarray:
    grad = np.zeros(p.shape)
    for coef, exps in terms:
        for j, ej in enumerate(exps):
            if ej == 0:
                continue
            mono = np.full(p.shape[:-1], float(coef) * ej)
            for i, e in enumerate(exps):
                power = e - 1 if i == j else e
                if power:
                    mono = mono * p[..., i] ** power
            grad[..., j] += mono
    return grad


def polynomial_field(name: str, table: Sequence[Sequence[Term]], domain: Box) -> VectorField:
    """Vector field whose i-th component is the polynomial table[i]."""
    if len(table) != domain.dim:
        raise ValueError(f"Coefficient table has {len(table)} components for a {domain.dim}-d domain.")

    def func(p: np.ndarray) -> np.ndarray:
        return np.stack([_monomials(p, comp) for comp in table], axis=-1)

    return VectorField(name, func, domain)


def polynomial_scalar(name: str, terms: Sequence[Term]) -> ScalarField:
    return ScalarField(
        name,
        lambda p: _as_scalar(_monomials(p, terms)),
        lambda p: _monomial_gradient(p, terms),
    )


def _as_scalar(v: np.ndarray):
    return float(v) if np.ndim(v) == 0 else v


# ------------------------------------------------------------------ fixtures

def _linear_sink(p: np.ndarray) -> np.ndarray:
    return -p


def _constant(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    out[..., 0] = 1.0
    return out


def _limit_cycle(p: np.ndarray) -> np.ndarray:
    x, y = p[..., 0], p[..., 1]
    s = 1.0 - (x * x + y * y)
    return np.stack([x * s - y, y * s + x], axis=-1)


def _limit_cycle_flow(t: float, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    r0 = float(np.hypot(p[0], p[1]))
    if r0 == 0.0:
        return p.copy()
    r = 1.0 / np.sqrt(1.0 + (1.0 / r0**2 - 1.0) * np.exp(-2.0 * t))
    theta = np.arctan2(p[1], p[0]) + t
    return np.array([r * np.cos(theta), r * np.sin(theta)])


def _chi_e1(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    out[..., 0] = p[..., 0] ** 2 + p[..., 1] ** 2
    return out


def _chi_e1_flow(t: float, p: np.ndarray) -> np.ndarray:
    x0, y = float(p[0]), float(p[1])
    if y == 0.0:
        x = x0 / (1.0 - x0 * t)
    else:
        x = y * np.tan(y * t + np.arctan(x0 / y))
    return np.array([x, y])


def shear_field(chi: Callable[[np.ndarray], np.ndarray] | None = None, domain: Box = DEFAULT_DOMAIN) -> VectorField:
    """X(x, y) = chi(y) e1 with flow (x + t chi(y), y); chi defaults to 1."""
    chi = chi or (lambda y: np.ones_like(np.asarray(y, dtype=float)))

    def func(p: np.ndarray) -> np.ndarray:
        out = np.zeros_like(p)
        out[..., 0] = chi(p[..., 1])
        return out

    def flow(t: float, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.array([p[0] + t * float(chi(p[1])), p[1]])

    return VectorField("shear", func, domain, None, flow)


FIXTURES: Mapping[str, Callable[[Box], VectorField]] = {
    "linear_sink": lambda d: VectorField("linear_sink", _linear_sink, d, None, lambda t, p: np.exp(-t) * np.asarray(p, dtype=float)),
    "constant": lambda d: VectorField(
        "constant", _constant, d, None, lambda t, p: np.asarray(p, dtype=float) + t * np.eye(len(p))[0]
    ),
    "limit_cycle": lambda d: VectorField("limit_cycle", _limit_cycle, d, None, _limit_cycle_flow),
    "chi_e1": lambda d: VectorField("chi_e1", _chi_e1, d, None, _chi_e1_flow),
    "shear": lambda d: shear_field(domain=d),
}


def fixture_field(name: str, domain: Box | None = None) -> VectorField:
    try:
        factory = FIXTURES[name]
    except KeyError:
        raise ValueError(f"Unknown fixture field {name!r}; known: {', '.join(sorted(FIXTURES))}") from None
    return factory(domain or DEFAULT_DOMAIN)


# ------------------------------------------------------- rescale and reduce

def completeness_factor(X: VectorField) -> ScalarField:
    """f(p) = 1 / (1 + |X(p)|)."""
    return ScalarField(f"f[{X.name}]", lambda p: _as_scalar(1.0 / (1.0 + np.linalg.norm(X(p), axis=-1))))


def rescale_complete(X: VectorField) -> VectorField:
    """fX with f = 1/(1+|X|): same orbits and chain recurrent set, speed below 1."""

    def func(p: np.ndarray) -> np.ndarray:
        v = X(p)
        return v / (1.0 + np.linalg.norm(v, axis=-1, keepdims=True))

    return VectorField(f"rescaled[{X.name}]", func, X.domain, X.regularity)


def blend_target(g: ScalarField, K, U_K: Neighborhood, collar: float | None = None) -> ScalarField:
    """Negative extension g_hat of g: g on K, -1 outside U_K, smooth blend across the collar.

    The collar is the outer shell R - w <= dist(p, K) <= R of U_K, R its radius;
    w defaults to 10% of R.
    """
    radius = U_K.radius
    w = 0.1 * radius if collar is None else float(collar)
    if not 0.0 < w <= radius:
        raise ValueError(f"Collar width must lie in (0, {radius}], got {w}")
    if K.is_empty:
        return ScalarField.constant(-1.0)
    step = SmoothStep(radius - w, radius)

    def func(p: np.ndarray):
        beta = 1.0 - step(K.distance(p))
        return _as_scalar(beta * g(p) + (1.0 - beta) * (-1.0))

    return ScalarField(f"blend[{g.name}]", func)


def check_negative(g: ScalarField, U_K: Neighborhood, n_samples: int = 512, seed: int = 0) -> None:
    if U_K.is_empty:
        return
    pts = np.vstack([U_K.base.sample(n_samples, seed), U_K.sample(n_samples, seed)])
    values = np.asarray(g(pts), dtype=float)
    if np.any(values >= 0):
        worst = int(np.argmax(values))
        raise AdmissionError(f"g must be negative on U_K; g({pts[worst]}) = {values[worst]:.6g}")


def reduce_to_unit(
    X: VectorField,
    g: ScalarField,
    K,
    U_K: Neighborhood,
    collar: float | None = None,
) -> VectorField:
    """X_g = -X / g_hat; a function with derivative -1 along X_g on K has derivative g along X."""
    check_negative(g, U_K)
    g_hat = blend_target(g, K, U_K, collar)

    def func(p: np.ndarray) -> np.ndarray:
        gh = np.asarray(g_hat(p), dtype=float)
        return -X(p) / gh[..., None] if gh.ndim else -X(p) / gh

    return VectorField(f"reduced[{X.name}]", func, X.domain, X.regularity)


@dataclass(frozen=True)
class WorkingSystem:
    """The raw field, the field the construction runs on, and the factor between them.

    X_raw(p) = speed_ratio(p) * working(p) with speed_ratio = -g_hat / f > 0.
    """

    raw: VectorField
    working: VectorField
    g: ScalarField
    g_hat: ScalarField
    factor: ScalarField

    def speed_ratio(self, p: np.ndarray):
        return _as_scalar(-np.asarray(self.g_hat(p)) / np.asarray(self.factor(p)))


def prepare_system(
    X_raw: VectorField,
    g: ScalarField,
    K,
    U_K: Neighborhood,
    collar: float | None = None,
) -> WorkingSystem:
    """Rescale for completeness, then reduce against the target f*g."""
    f = completeness_factor(X_raw)
    Xf = rescale_complete(X_raw)
    g_scaled = ScalarField(f"{g.name}*f", lambda p: _as_scalar(np.asarray(g(p)) * np.asarray(f(p))))
    working = reduce_to_unit(Xf, g_scaled, K, U_K, collar)
    g_hat = blend_target(g_scaled, K, U_K, collar)
    logger.info("working field %s prepared (collar %s)", working.name, collar if collar is not None else "default")
    return WorkingSystem(X_raw, working, g, g_hat, f)
