from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.spatial.distance import pdist

from app.errors import AdmissionError, CollocationError, StackFormatError
from app.flow import FlowMapConfig, central_flow_difference
from app.regions import Annulus, Box
from app.system import ScalarField, VectorField

logger = logging.getLogger(__name__)

FD_DELTA = 1e-4


class LyapunovEvaluator(ABC):
    """tau with optional gradient; provenance is analytic, collocation or modified-stack."""

    provenance: str = "analytic"
    name: str = "tau"

    @abstractmethod
    def value(self, p: np.ndarray): ...

    def gradient(self, p: np.ndarray) -> np.ndarray | None:
        return None

    def derivative_along(self, X: VectorField, p: np.ndarray) -> float | None:
        """Analytic orbital derivative along X, when the evaluator can give one."""
        grad = self.gradient(p)
        if grad is None:
            return None
        return np.sum(grad * X(p), axis=-1)

    def __call__(self, p: np.ndarray):
        return self.value(p)


class AnalyticEvaluator(LyapunovEvaluator):
    def __init__(self, scalar: ScalarField, provenance: str = "analytic") -> None:
        self.scalar = scalar
        self.name = scalar.name
        self.provenance = provenance

    def value(self, p: np.ndarray):
        return self.scalar(p)

    def gradient(self, p: np.ndarray) -> np.ndarray | None:
        if self.scalar.gradient is None:
            return None
        return self.scalar.gradient(np.asarray(p, dtype=float))


def orbital_derivative(
    tau: LyapunovEvaluator,
    X: VectorField,
    p: np.ndarray,
    cfg: FlowMapConfig = FlowMapConfig(),
    delta: float = FD_DELTA,
) -> float:
    """grad tau . X when a gradient exists, else the Richardson flow difference."""
    p = np.asarray(p, dtype=float)
    d = tau.derivative_along(X, p)
    if d is not None:
        return float(d)
    return central_flow_difference(tau.value, X, p, delta, cfg)


def require_strict_decrease(tau: LyapunovEvaluator, X: VectorField, points: np.ndarray, cfg: FlowMapConfig = FlowMapConfig()) -> float:
    """min of -tau_dot over the points; rejects the base when it is not positive."""
    if len(points) == 0:
        return np.inf
    rates = np.array([orbital_derivative(tau, X, p, cfg) for p in points])
    worst = int(np.argmax(rates))
    margin = float(-rates[worst])
    if margin <= 0:
        raise AdmissionError(f"base tau does not strictly decrease at {points[worst]} (tau_dot = {rates[worst]:.3g})")
    return margin


# ------------------------------------------------------------------ fixtures

def _sq_norm_half(p: np.ndarray):
    v = 0.5 * np.sum(p * p, axis=-1)
    return float(v) if np.ndim(v) == 0 else v


def _minus_x0(p: np.ndarray):
    v = -p[..., 0]
    return float(v) if np.ndim(v) == 0 else v


def _minus_e0(p: np.ndarray) -> np.ndarray:
    g = np.zeros_like(p)
    g[..., 0] = -1.0
    return g


def _ring(p: np.ndarray):
    v = (1.0 - np.sum(p * p, axis=-1)) ** 2
    return float(v) if np.ndim(v) == 0 else v


def _ring_gradient(p: np.ndarray) -> np.ndarray:
    s = 1.0 - np.sum(p * p, axis=-1, keepdims=True)
    return -4.0 * s * p


_FIXTURE_BASES = {
    "linear_sink": ScalarField("half_sq_norm", _sq_norm_half, lambda p: p.copy()),
    "constant": ScalarField("minus_x", _minus_x0, _minus_e0),
    "limit_cycle": ScalarField("ring", _ring, _ring_gradient),
    "chi_e1": ScalarField("minus_x", _minus_x0, _minus_e0),
    "shear": ScalarField("minus_x", _minus_x0, _minus_e0),
}


def fixture_base(name: str) -> AnalyticEvaluator:
    try:
        return AnalyticEvaluator(_FIXTURE_BASES[name])
    except KeyError:
        raise ValueError(f"No analytic base for {name!r}; known: {', '.join(sorted(_FIXTURE_BASES))}") from None


# --------------------------------------------------------------- collocation

@dataclass(frozen=True)
class WendlandKernel:
    """Compactly supported Wendland function psi(c r) with support radius 1/c.

    psi1 = psi'(r)/r and psi2 = psi1'(r)/r are what the collocation matrix needs.
    """

    kind: str = "wendland53"
    shape: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("wendland53", "wendland42"):
            raise ValueError(f"Unknown kernel {self.kind!r}; use wendland53 or wendland42.")
        if self.shape <= 0:
            raise ValueError("Kernel shape parameter must be positive.")

    @property
    def support(self) -> float:
        return 1.0 / self.shape

    def _s(self, r):
        s = self.shape * np.asarray(r, dtype=float)
        return s, np.clip(1.0 - s, 0.0, None)

    def psi(self, r):
        s, u = self._s(r)
        if self.kind == "wendland53":
            return u**8 * (32 * s**3 + 25 * s**2 + 8 * s + 1)
        return u**6 * (35 * s**2 + 18 * s + 3)

    def psi1(self, r):
        s, u = self._s(r)
        c2 = self.shape**2
        if self.kind == "wendland53":
            return -22 * c2 * u**7 * (16 * s**2 + 7 * s + 1)
        return -56 * c2 * u**5 * (5 * s + 1)

    def psi2(self, r):
        s, u = self._s(r)
        c4 = self.shape**4
        if self.kind == "wendland53":
            return 528 * c4 * u**6 * (6 * s + 1)
        return 1680 * c4 * u**4


@dataclass
class CollocationModel:
    kernel: WendlandKernel
    nodes: np.ndarray
    directions: np.ndarray  # X at the nodes
    coefficients: np.ndarray
    target: str = "const(-1)"
    node_residual: float = 0.0
    condition: float = field(default=np.nan)

    def __post_init__(self) -> None:
        if not (len(self.nodes) == len(self.directions) == len(self.coefficients)):
            raise ValueError("Collocation model needs one direction and one coefficient per node.")

    @property
    def size(self) -> int:
        return len(self.nodes)

    def _terms(self, p: np.ndarray):
        d = p[..., None, :] - self.nodes  # (..., m, n)
        r = np.linalg.norm(d, axis=-1)
        proj = np.sum(d * self.directions, axis=-1)
        return d, r, proj

    def value(self, p: np.ndarray):
        p = np.asarray(p, dtype=float)
        _, r, proj = self._terms(p)
        v = -np.sum(self.coefficients * self.kernel.psi1(r) * proj, axis=-1)
        return float(v) if np.ndim(v) == 0 else v

    def gradient(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        d, r, proj = self._terms(p)
        w2 = (self.coefficients * self.kernel.psi2(r) * proj)[..., None]
        w1 = (self.coefficients * self.kernel.psi1(r))[..., None]
        return -np.sum(w2 * d + w1 * self.directions, axis=-2)


class CollocationEvaluator(LyapunovEvaluator):
    provenance = "collocation"

    def __init__(self, model: CollocationModel) -> None:
        self.model = model
        self.name = f"collocation[{model.kernel.kind}, {model.size} nodes]"

    def value(self, p: np.ndarray):
        return self.model.value(p)

    def gradient(self, p: np.ndarray) -> np.ndarray:
        return self.model.gradient(p)


def _bounding_box(region) -> Box:
    if isinstance(region, Box):
        return region
    if isinstance(region, Annulus):
        c = np.asarray(region.center, dtype=float)
        return Box(tuple(c - region.r_hi), tuple(c + region.r_hi))
    raise ValueError(f"Cannot lay collocation nodes over {type(region).__name__}")


def grid_nodes(
    region,
    spacing: float,
    X: VectorField | None = None,
    avoid=None,
    margin: float = 0.0,
) -> np.ndarray:
    """Uniform grid nodes inside the region, away from `avoid` and from equilibria of X."""
    if spacing <= 0:
        raise ValueError("Node spacing must be positive.")
    box = _bounding_box(region)
    axes = [np.arange(lo, hi + 0.5 * spacing, spacing) for lo, hi in zip(box.lo, box.hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, box.dim)
    pts = pts[np.asarray(region.contains(pts), dtype=bool)]
    if avoid is not None and not avoid.is_empty and len(pts):
        pts = pts[np.asarray(avoid.distance(pts)) >= margin]
    if X is not None and len(pts):
        pts = pts[np.linalg.norm(X(pts), axis=-1) > 1e-12]
    return pts


def collocation_matrix(kernel: WendlandKernel, nodes: np.ndarray, directions: np.ndarray) -> np.ndarray:
    d = nodes[:, None, :] - nodes[None, :, :]
    r = np.linalg.norm(d, axis=-1)
    a = np.sum(d * directions[None, :, :], axis=-1)  # <x_j - x_k, X_k>
    b = np.sum(d * directions[:, None, :], axis=-1)  # <x_j - x_k, X_j>
    return -kernel.psi2(r) * a * b - kernel.psi1(r) * (directions @ directions.T)


def collocation_fit(
    X: VectorField,
    nodes: np.ndarray,
    h: ScalarField | None = None,
    kernel: WendlandKernel = WendlandKernel(),
    max_condition: float = 1e14,
) -> CollocationModel:
    """Symmetric collocation of grad(tau) . X = h at the nodes."""
    nodes = np.asarray(nodes, dtype=float).reshape(-1, X.dim)
    if len(nodes) == 0:
        raise CollocationError("collocation needs at least one node")
    if len(nodes) > 1 and pdist(nodes).min() == 0.0:
        raise CollocationError("collocation nodes must be pairwise distinct")
    h = h or ScalarField.constant(-1.0)
    directions = X(nodes)
    A = collocation_matrix(kernel, nodes, directions)
    rhs = np.asarray(h(nodes), dtype=float).reshape(-1)
    cond = float(np.linalg.cond(A))
    if not np.isfinite(cond) or cond > max_condition:
        raise CollocationError(
            f"collocation matrix is ill-conditioned (cond ~ {cond:.3g}); thin the nodes or raise the shape parameter"
        )
    if cond > 1e10:
        logger.warning("collocation matrix condition number %.3g", cond)
    try:
        factor = linalg.cho_factor(A)
    except linalg.LinAlgError as exc:
        raise CollocationError(f"collocation matrix is not positive definite ({exc}); check for equilibria among the nodes") from exc
    coef = linalg.cho_solve(factor, rhs)
    coef = coef + linalg.cho_solve(factor, rhs - A @ coef)
    residual = float(np.max(np.abs(A @ coef - rhs)))
    logger.info("collocation fit: %d nodes, %s, cond %.3g, node residual %.3g", len(nodes), kernel.kind, cond, residual)
    return CollocationModel(kernel, nodes, directions, coef, h.name, residual, cond)


def collocation_base(model: CollocationModel) -> CollocationEvaluator:
    return CollocationEvaluator(model)


def save_model(model: CollocationModel, path: Path) -> Path:
    path = Path(path)
    n = model.nodes.shape[1]
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"{model.kernel.kind} {model.kernel.shape!r} {model.size} {n}\n")
        fh.write(f"{model.node_residual!r} {model.condition!r} {model.target}\n")
        frame = pd.DataFrame(np.column_stack([model.nodes, model.directions, model.coefficients]))
        frame.to_csv(fh, sep=" ", header=False, index=False, float_format="%.17g")
    return path


def load_model(path: Path) -> CollocationModel:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            kind, shape, size, n = fh.readline().split()
            residual, condition, target = fh.readline().rstrip("\n").split(" ", 2)
            kernel = WendlandKernel(kind, float(shape))
            size, n = int(size), int(n)
            if size:
                rows = pd.read_csv(fh, sep=" ", header=None, float_precision="round_trip").to_numpy(dtype=float)
            else:
                rows = np.empty((0, 2 * n + 1))
    except (ValueError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise StackFormatError(f"{path}: unreadable collocation model ({exc})") from exc
    if rows.shape != (size, 2 * n + 1):
        raise StackFormatError(f"{path}: expected {size} rows of {2 * n + 1} numbers, got {rows.shape}")
    return CollocationModel(
        kernel, rows[:, :n], rows[:, n:2 * n], rows[:, 2 * n], target, float(residual), float(condition)
    )
