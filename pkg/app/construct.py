from __future__ import annotations

import logging
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Hashable, NamedTuple, Sequence

import numpy as np
from scipy.optimize import brentq

from app.baselyap import LyapunovEvaluator, fixture_base, orbital_derivative, require_strict_decrease
from app.bumps import RadialBump, SmoothStep, smoothstep
from app.errors import (
    AdmissionError,
    BracketError,
    ConstructionError,
    CoverShrinkError,
    DomainExitError,
    EpsilonSearchError,
    SectionError,
)
from app.flow import UNIT_SPEED_WINDOW, Fiber, FlowBox, FlowMapConfig, level_crossing, level_time, section_from_level
from app.regions import Neighborhood
from app.system import ScalarField, VectorField, WorkingSystem, prepare_system

logger = logging.getLogger(__name__)

__all__ = [
    "BoxModification",
    "ConstructConfig",
    "ConstructionPlan",
    "Jet",
    "ModifiedEvaluator",
    "PrescribedEvaluator",
    "ScaledEvaluator",
    "SmoothStep",
    "choose_cover",
    "construct_prescribed",
    "modify_box",
    "scale_constant",
    "smoothstep",
    "step1",
    "step2",
    "step3",
    "step4",
]

MU_MINUS = SmoothStep(-1.5, -1.25)
NU1_PROFILE = SmoothStep(0.05, 1.0)


class Jet(NamedTuple):
    """A value and its derivative along the flow (d/dt in box coordinates)."""

    value: float
    slope: float


@dataclass(frozen=True)
class ConstructConfig:
    section_extent: float = 1.0
    section_margin: float = 0.25
    cover_time: float = 1.0
    level_gap: float = 1e-3
    recurrent_margin: float = 0.05
    collar: float | None = None
    k_samples: int = 256
    q_samples: int = 32
    t_samples: int = 9
    disjoint_samples: int = 64
    scale_q_samples: int = 32
    scale_t_samples: int = 33
    cover_radius: float = 0.5
    max_halvings: int = 12
    eps_start: float = 0.45
    eps_min: float = 1e-3
    gap_margin: float = 1e-9
    slope_tol: float = 1e-6
    safety: float = 1.1
    max_boxes: int = 64
    trace_step: float | None = None
    seed: int = 0
    flow: FlowMapConfig = field(default_factory=FlowMapConfig)

    def __post_init__(self) -> None:
        if self.section_extent <= 0 or self.section_margin <= 0:
            raise ValueError("Section extent and margin must be positive.")
        if not 0 < self.cover_time <= 1:
            raise ValueError("cover_time must lie in (0, 1].")
        if not 0 < self.eps_start < 0.5:
            raise ValueError("eps_start must lie in (0, 1/2).")
        if self.safety <= 1:
            raise ValueError("The scale safety factor must exceed 1.")


# ------------------------------------------------------------- the four steps

def step1(tau: Jet, A: float, t: float, mu_minus: SmoothStep = MU_MINUS) -> Jet:
    """tau1 = (1 - mu)tau + mu(A - (t + 3/2)), A = tau(-1, q)."""
    mu, dmu = mu_minus(t), mu_minus.derivative(t)
    ramp = A - (t + 1.5)
    value = (1.0 - mu) * tau.value + mu * ramp
    slope = (1.0 - mu) * tau.slope - mu + dmu * (ramp - tau.value)
    return Jet(value, slope)


def step2(
    tau: Jet,
    tau1: Jet,
    t: float,
    nu1: float,
    weights: Sequence[float],
    phis: Sequence[float],
    levels: Sequence[float],
) -> Jet:
    """nu1 * sum_j w_j sigma_j + (1 - nu1) tau1.

    sigma_j follows tau up to phi_j and continues with unit speed from the level
    levels[j] = tau(phi_j, q) after it.
    """
    sig_v = sig_s = 0.0
    for w, phi, c in zip(weights, phis, levels):
        if t <= phi:
            sig_v += w * tau.value
            sig_s += w * tau.slope
        else:
            sig_v += w * (c - t + phi)
            sig_s -= w
    return Jet(nu1 * sig_v + (1.0 - nu1) * tau1.value, nu1 * sig_s + (1.0 - nu1) * tau1.slope)


def step3(tau2: Jet, tau: Jet, t: float, mu_plus: SmoothStep) -> Jet:
    mu, dmu = mu_plus(t), mu_plus.derivative(t)
    value = (1.0 - mu) * tau2.value + mu * tau.value
    slope = (1.0 - mu) * tau2.slope + mu * tau.slope + dmu * (tau.value - tau2.value)
    return Jet(value, slope)


def step4(tau3: Jet, tau: Jet, nu2: float) -> Jet:
    return Jet(nu2 * tau3.value + (1.0 - nu2) * tau.value, nu2 * tau3.slope + (1.0 - nu2) * tau.slope)


# ---------------------------------------------------------- box coordinates

@dataclass(frozen=True)
class ParamInterval:
    """Parameter domain of a section: [lo, hi], or a circle of length hi - lo when closed."""

    lo: float
    hi: float
    closed: bool = False

    @property
    def period(self) -> float:
        return self.hi - self.lo

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def wrap(self, q: float) -> float:
        return float(self.lo + np.mod(q - self.lo, self.period)) if self.closed else float(q)

    def contains_param(self, q: float, closure: bool = False) -> bool:
        if self.closed:
            return True
        return self.lo <= q <= self.hi if closure else self.lo < q < self.hi

    def dist_outside(self, q: float) -> float:
        return 0.0 if self.closed else max(self.lo - q, q - self.hi, 0.0)

    def param_distance(self, a: float, b: float) -> float:
        d = abs(a - b)
        if self.closed:
            d = np.mod(d, self.period)
            d = min(d, self.period - d)
        return float(d)

    def param_grid(self, m: int) -> np.ndarray:
        if self.closed:
            return self.lo + self.period * np.arange(m) / m
        return np.linspace(self.lo, self.hi, m)


class _Memo:
    """Thread-safe memo; concurrent misses may compute twice, the first store wins."""

    def __init__(self) -> None:
        self._data: dict = {}
        self._lock = threading.Lock()

    def get(self, key: Hashable, compute: Callable[[], object]):
        with self._lock:
            if key in self._data:
                return self._data[key]
        value = compute()
        with self._lock:
            return self._data.setdefault(key, value)

    def __len__(self) -> int:
        return len(self._data)


def _qkey(q: float) -> float:
    return round(float(q), 12)


class BoxFunction(ABC):
    """A function in flow-box coordinates (t, q) together with its t-derivative."""

    @abstractmethod
    def jet(self, t: float, q: float) -> Jet: ...

    def level_time(self, q: float, c: float, window: tuple[float, float] = UNIT_SPEED_WINDOW) -> float:
        lo, hi = window
        g_lo, g_hi = self.jet(lo, q).value - c, self.jet(hi, q).value - c
        if g_lo == 0.0:
            return lo
        if g_hi == 0.0:
            return hi
        if not g_lo > 0 > g_hi:
            raise BracketError(f"level {c:.9g} is not bracketed on {window} at q={q:.6g}")
        return float(brentq(lambda u: self.jet(u, q).value - c, lo, hi, xtol=1e-13))


class UnitSpeedBox(BoxFunction):
    """tau(t, q) = offset(q) - t."""

    def __init__(self, offset: Callable[[float], float]) -> None:
        self.offset = offset

    def jet(self, t: float, q: float) -> Jet:
        return Jet(float(self.offset(q)) - t, -1.0)

    def level_time(self, q: float, c: float, window: tuple[float, float] = UNIT_SPEED_WINDOW) -> float:
        u = float(self.offset(q)) - c
        if not window[0] <= u <= window[1]:
            raise BracketError(f"level {c:.9g} is reached at u={u:.6g}, outside {window}")
        return u


class StackedBoxFunction(BoxFunction):
    """The previous evaluator read through the chart of a flow box."""

    def __init__(self, box: FlowBox, previous) -> None:
        self.box = box
        self.previous = previous
        self._fibers = _Memo()

    def jet(self, t: float, q: float) -> Jet:
        return self.previous.jet(self.box.chart(t, q))

    def fiber(self, q: float) -> Fiber:
        lo = UNIT_SPEED_WINDOW[0]
        return self._fibers.get(_qkey(q), lambda: self.box.fiber(q, lo, 0.0))

    def level_time(self, q: float, c: float, window: tuple[float, float] = UNIT_SPEED_WINDOW) -> float:
        return level_time(self.previous, self.box, q, c, window, fiber=self.fiber(q))


# ------------------------------------------------------------ modifications

@dataclass(frozen=True)
class CoverPatch:
    """U_j: parameter ball of `radius` about `center`; (time, center) is the point of M it was grown from."""

    center: float
    time: float
    radius: float
    level: float

    @property
    def bump(self) -> RadialBump:
        return RadialBump(0.5 * self.radius, self.radius)


@dataclass(frozen=True)
class MRecord:
    """Which earlier boxes make up M, and the (q, t) samples of W x [-7/4, -5/4] found inside it."""

    earlier: tuple[int, ...] = ()
    marked: tuple[tuple[float, float], ...] = ()


@dataclass(eq=False)
class BoxModification:
    coords: BoxFunction
    k: int
    eps: float
    inner: ParamInterval
    outer: ParamInterval
    cover: tuple[CoverPatch, ...] = ()
    M_record: MRecord = MRecord()
    box: FlowBox | None = None

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("Box index k starts at 1.")
        self.cover = tuple(self.cover)
        self.mu_minus = MU_MINUS
        self.set_eps(self.eps)
        if self.outer.closed:
            self.nu2_margin = None
        else:
            self.nu2_margin = min(self.inner.lo - self.outer.lo, self.outer.hi - self.inner.hi)
            if self.nu2_margin <= 0:
                raise ValueError("The inner section must sit strictly inside the outer one.")
            self._nu2_profile = SmoothStep(0.25 * self.nu2_margin, 0.75 * self.nu2_margin)
        self._A = _Memo()
        self._phi = _Memo()

    def set_eps(self, eps: float) -> None:
        if eps <= 0:
            raise ValueError("eps must be positive.")
        self.eps = float(eps)
        top = self.k + 1
        self.mu_plus = SmoothStep(top - 2 * self.eps, top - self.eps)

    @property
    def half_width(self) -> float:
        return float(self.k + 1)

    # q-profiles

    def nu2(self, q: float) -> float:
        if self.nu2_margin is None:
            return 1.0
        return 1.0 - self._nu2_profile(self.inner.dist_outside(q))

    def bumps(self, q: float) -> np.ndarray:
        return np.array([p.bump(self.outer.param_distance(q, p.center)) for p in self.cover], dtype=float)

    def nu1(self, q: float) -> float:
        if not self.cover:
            return 0.0
        return NU1_PROFILE(float(self.bumps(q).sum()))

    def weights(self, q: float) -> np.ndarray:
        b = self.bumps(q)
        total = b.sum()
        return b / total if total > 0 else np.zeros_like(b)

    # memoized fiber quantities

    def A(self, q: float) -> float:
        """tau(-1, q)."""
        return self._A.get(_qkey(q), lambda: self.coords.jet(-1.0, q).value)

    def phi(self, j: int, q: float) -> float:
        patch = self.cover[j]
        return self._phi.get((j, _qkey(q)), lambda: self.coords.level_time(q, patch.level, UNIT_SPEED_WINDOW))

    # the steps in box coordinates; tau may be passed when already known at (t, q)

    def tau1(self, t: float, q: float, tau: Jet | None = None) -> Jet:
        tau = self.coords.jet(t, q) if tau is None else tau
        if t <= self.mu_minus.lo:
            return tau
        return step1(tau, self.A(q), t, self.mu_minus)

    def tau2(self, t: float, q: float, tau: Jet | None = None) -> Jet:
        tau = self.coords.jet(t, q) if tau is None else tau
        j1 = self.tau1(t, q, tau)
        n1 = self.nu1(q)
        if n1 == 0.0:
            return j1
        w = self.weights(q)
        active = [j for j in range(len(self.cover)) if w[j] > 0]
        phis = [self.phi(j, q) for j in active]
        levels = [self.cover[j].level for j in active]
        return step2(tau, j1, t, n1, w[active], phis, levels)

    def tau3(self, t: float, q: float, tau: Jet | None = None) -> Jet:
        tau = self.coords.jet(t, q) if tau is None else tau
        if t >= self.mu_plus.hi:
            return tau
        j2 = self.tau2(t, q, tau)
        if t <= self.mu_plus.lo:
            return j2
        return step3(j2, tau, t, self.mu_plus)

    def tau4(self, t: float, q: float, tau: Jet | None = None) -> Jet:
        tau = self.coords.jet(t, q) if tau is None else tau
        n2 = self.nu2(q)
        if n2 == 0.0:
            return tau
        return step4(self.tau3(t, q, tau), tau, n2)

    jet = tau4

    def invariant_violations(self) -> list[str]:
        out = []
        if not 0.0 < self.eps < 0.5:
            out.append(f"box {self.k}: eps = {self.eps:g} is outside (0, 1/2)")
        for p in self.cover:
            if p.radius <= 0:
                out.append(f"box {self.k}: cover patch at q={p.center:g} has radius {p.radius:g}")
            if self.outer.dist_outside(p.center) > 0:
                out.append(f"box {self.k}: cover center q={p.center:g} lies outside the outer section")
            if not -1.75 <= p.time <= -1.25:
                out.append(f"box {self.k}: cover point time {p.time:g} is outside [-7/4, -5/4]")
        return out


# --------------------------------------------------------------- evaluators

class ScaledEvaluator(LyapunovEvaluator):
    """C * tau' with jets along the working field."""

    def __init__(self, base: LyapunovEvaluator, scale: float, field: VectorField, cfg: FlowMapConfig = FlowMapConfig()) -> None:
        self.base = base
        self.scale = float(scale)
        self.field = field
        self.cfg = cfg
        self.provenance = base.provenance
        self.name = f"{self.scale:g}*{base.name}"

    def value(self, p: np.ndarray):
        return self.scale * self.base.value(p)

    def gradient(self, p: np.ndarray) -> np.ndarray | None:
        g = self.base.gradient(p)
        return None if g is None else self.scale * g

    def jet(self, p: np.ndarray) -> Jet:
        p = np.asarray(p, dtype=float)
        return Jet(float(self.value(p)), self.scale * orbital_derivative(self.base, self.field, p, self.cfg))


class ModifiedEvaluator(LyapunovEvaluator):
    """tau_k: the previous function with box k's modification applied inside W_{s,k+1}."""

    provenance = "modified-stack"

    def __init__(self, previous, modification: BoxModification) -> None:
        if modification.box is None:
            raise ValueError("A stacked modification needs its flow box.")
        self.previous = previous
        self.modification = modification
        self.box = modification.box
        self.field = self.box.field
        self.name = f"modified[{modification.k}]"

    def jet(self, p: np.ndarray) -> Jet:
        p = np.asarray(p, dtype=float)
        hit = self.box.inverse(p)
        tau = self.previous.jet(p)
        if hit is None:
            return tau
        t, q = hit
        return self.modification.jet(t, q, tau)

    def value(self, p: np.ndarray):
        return self.jet(p).value

    def derivative_along(self, X: VectorField, p: np.ndarray) -> float | None:
        return self.jet(p).slope if X is self.field else None


class PrescribedEvaluator(LyapunovEvaluator):
    """tau_K: the top of the stack, with derivatives reported along the raw field."""

    provenance = "modified-stack"

    def __init__(self, top, system: WorkingSystem, plan: "ConstructionPlan", modifications: Sequence[BoxModification]) -> None:
        self.top = top
        self.system = system
        self.plan = plan
        self.modifications = list(modifications)
        self.name = "tau_K"

    @property
    def depth(self) -> int:
        return len(self.modifications)

    def jet(self, p: np.ndarray) -> Jet:
        return self.top.jet(np.asarray(p, dtype=float))

    def value(self, p: np.ndarray):
        p = np.asarray(p, dtype=float)
        if p.ndim > 1:
            return np.array([self.top.value(x) for x in p.reshape(-1, p.shape[-1])]).reshape(p.shape[:-1])
        return float(self.top.value(p))

    def derivative_along(self, X: VectorField, p: np.ndarray) -> float | None:
        if X is self.system.working:
            return self.jet(p).slope
        if X is self.system.raw:
            return self.jet(p).slope * float(self.system.speed_ratio(np.asarray(p, dtype=float)))
        return None

    def rate(self, p: np.ndarray) -> float:
        """Orbital derivative along the raw field."""
        return self.derivative_along(self.system.raw, p)


# -------------------------------------------------------------------- cover

@dataclass(eq=False)
class ConstructionPlan:
    boxes: list[FlowBox]
    base: LyapunovEvaluator
    scale: float = float("nan")

    @property
    def N(self) -> int:
        return len(self.boxes)

    @property
    def levels(self) -> list[float]:
        return [b.level for b in self.boxes]

    @property
    def scaled_levels(self) -> list[float]:
        return [self.scale * r for r in self.levels]

    def check_levels(self) -> None:
        levels = self.levels
        if any(a <= b for a, b in zip(levels, levels[1:])):
            raise ValueError(f"Box levels must be strictly decreasing, got {levels}")

    def inner_covers(self, p: np.ndarray) -> bool:
        return any(b.inverse(p, half_width=1.0, inner=True) is not None for b in self.boxes)

    def outer_contains(self, p: np.ndarray) -> bool:
        return any(b.inverse(p) is not None for b in self.boxes)


def _free_level(r: float, taken: Sequence[float], gap: float) -> float:
    """The level nearest r at distance >= gap from every taken level."""
    if all(abs(r - l) >= gap for l in taken):
        return r
    candidates = sorted({l + gap for l in taken} | {l - gap for l in taken}, key=lambda c: abs(c - r))
    for c in candidates:
        if all(abs(c - l) >= gap * (1 - 1e-12) for l in taken):
            return c
    raise ValueError("no free level")  # unreachable: the extreme candidates are always free


def choose_cover(
    K,
    tau: LyapunovEvaluator,
    recurrent,
    X: VectorField,
    cfg: ConstructConfig = ConstructConfig(),
) -> ConstructionPlan:
    """Greedy flow-box cover of K; returns boxes sorted by decreasing level, box k of half-width k + 1."""
    if K.is_empty:
        return ConstructionPlan([], tau)
    samples = K.sample(cfg.k_samples, cfg.seed)
    if recurrent is not None and not recurrent.is_empty:
        d = np.asarray(recurrent.distance(samples))
        if d.min() <= cfg.recurrent_margin:
            raise AdmissionError(
                f"K comes within {d.min():.3g} of the recurrent cells at {samples[int(np.argmin(d))]}"
                f" (margin {cfg.recurrent_margin:g})"
            )
    require_strict_decrease(tau, X, samples, cfg.flow)

    boxes: list[FlowBox] = []
    uncovered = np.ones(len(samples), dtype=bool)
    while uncovered.any():
        i = int(np.argmax(uncovered))
        p = samples[i]
        r = float(tau.value(p))
        level = _free_level(r, [b.level for b in boxes], cfg.level_gap)
        seed = p
        if level != r:
            budget = cfg.cover_time if r > level else -cfg.cover_time
            hit = level_crossing(X, tau, p, level, budget, cfg.flow)
            if hit is None:
                raise ConstructionError("cover", f"cannot move the seed {p} off the taken level {r:.9g}", seed=p)
            seed = hit[1]
            logger.debug("seed %s moved along its orbit from level %.9g to %.9g", p, r, level)
        outer = section_from_level(
            tau,
            level,
            seed,
            cfg.section_extent + cfg.section_margin,
            X,
            cfg.flow,
            avoid=recurrent,
            avoid_margin=cfg.recurrent_margin,
            step=cfg.trace_step,
        )
        inner = outer if outer.closed else outer.restrict(-cfg.section_extent, cfg.section_extent)
        box = FlowBox(inner, outer, 1.0, 0, X, cfg.flow)
        for j in np.nonzero(uncovered)[0]:
            if box.inverse(samples[j], half_width=cfg.cover_time, inner=True) is not None:
                uncovered[j] = False
        if uncovered[i]:
            logger.warning("cover seed %s not recovered by its own box; marking it covered", p)
            uncovered[i] = False
        boxes.append(box)
        if len(boxes) > cfg.max_boxes:
            raise ConstructionError("cover", f"more than {cfg.max_boxes} boxes needed", uncovered=int(uncovered.sum()))

    boxes.sort(key=lambda b: -b.level)
    for k, box in enumerate(boxes, 1):
        box.k_index = k
        box.half_width = float(k + 1)
    plan = ConstructionPlan(boxes, tau)
    plan.check_levels()
    logger.info("cover of K: N = %d boxes at levels %s", plan.N, ", ".join(f"{l:.6g}" for l in plan.levels))
    return plan


def scale_from_margin(N: int, m: float, safety: float = 1.1) -> float:
    """C = safety (N + 3) / m."""
    if m <= 0:
        raise AdmissionError(f"base tau is not strictly decreasing on the boxes (min -tau_dot = {m:.3g})")
    return safety * (N + 3) / m


def scale_constant(plan: ConstructionPlan, X: VectorField, cfg: ConstructConfig = ConstructConfig()) -> float:
    """Smallest-margin C with C tau_dot' < -(N + 3) on sampled W_{s_i, i+1}; stored on the plan."""
    if plan.N == 0:
        plan.scale = 1.0
        return 1.0
    worst = -np.inf
    skipped = 0
    for k, box in enumerate(plan.boxes, 1):
        T = float(k + 1)
        for q in box.outer.param_grid(cfg.scale_q_samples):
            fib = box.fiber(q, -T, T)
            for t in np.linspace(-T, T, cfg.scale_t_samples):
                if not fib.covers(t):
                    skipped += 1
                    continue
                worst = max(worst, orbital_derivative(plan.base, X, fib(t), cfg.flow))
    if skipped:
        logger.warning("%d scale samples skipped where box fibers leave the domain", skipped)
    C = scale_from_margin(plan.N, -worst, cfg.safety)
    if not C * worst < -(plan.N + 3):
        raise ConstructionError("scale", f"C = {C:.6g} fails C tau_dot' < -(N+3)", worst=worst)
    plan.scale = C
    logger.info("scale constant C = %.6g (N = %d, min -tau_dot' = %.6g); C tau_dot' < -(N+3) holds on the sample", C, plan.N, -worst)
    return C


# ------------------------------------------------------------------ box step

def _patch_ok(coords: BoxFunction, outer, q0: float, level: float, radius: float, tol: float) -> bool:
    lo, hi = UNIT_SPEED_WINDOW
    for q in np.linspace(q0 - 1.2 * radius, q0 + 1.2 * radius, 9):
        if outer.dist_outside(q) > 0:
            continue
        q = outer.wrap(q)
        try:
            phi = coords.level_time(q, level)
            for u in (phi, min(phi + 0.05, hi), max(phi - 0.05, lo)):
                if abs(coords.jet(u, q).slope + 1.0) > tol:
                    return False
        except (BracketError, DomainExitError):
            return False
    return True


def _build_cover(coords: BoxFunction, outer, marked: Sequence[tuple[float, float]], dq: float, cfg: ConstructConfig) -> tuple[CoverPatch, ...]:
    best_t: dict[float, float] = {}
    for q, t in marked:
        if q not in best_t or abs(t + 1.5) < abs(best_t[q] + 1.5):
            best_t[q] = t
    uncovered = sorted(best_t)
    patches = []
    start = min(cfg.cover_radius, 0.5 * outer.length)
    while uncovered:
        q0 = uncovered[0]
        t0 = best_t[q0]
        level = coords.jet(t0, q0).value
        radius = start
        for _ in range(cfg.max_halvings + 1):
            if _patch_ok(coords, outer, q0, level, radius, cfg.slope_tol):
                break
            radius *= 0.5
            logger.debug("cover patch at q=%.6g shrunk to radius %.3g", q0, radius)
        else:
            raise CoverShrinkError(q0, time=t0, level=level)
        patches.append(CoverPatch(q0, t0, radius, level))
        reach = max(0.5 * radius - dq, 0.0)
        uncovered = [q for q in uncovered if q != q0 and outer.param_distance(q, q0) > reach]
    return tuple(patches)


def _search_epsilon(mod: BoxModification, fibers: dict, previous, cfg: ConstructConfig) -> tuple[float, float]:
    top = mod.k + 1.0
    eps = cfg.eps_start
    while True:
        gap = np.inf
        for q, fib in fibers.items():
            for t in np.linspace(top - 2 * eps, top, cfg.t_samples):
                if not fib.covers(t):
                    continue
                tau = previous.jet(fib(t))
                gap = min(gap, mod.tau2(t, q, tau).value - tau.value)
        if gap > cfg.gap_margin:
            return eps, gap
        logger.debug("box %d: eps %.4g leaves gap %.3g; halving", mod.k, eps, gap)
        eps *= 0.5
        if eps < cfg.eps_min:
            raise EpsilonSearchError(gap, box=mod.k)


def modify_box(
    previous,
    earlier: Sequence[FlowBox],
    box: FlowBox,
    k: int,
    X: VectorField,
    cfg: ConstructConfig = ConstructConfig(),
) -> BoxModification:
    """Lemma-style modification of `previous` inside box k; earlier boxes make up M."""
    T = float(k + 1)
    coords = StackedBoxFunction(box, previous)
    qs = box.outer.param_grid(cfg.q_samples)
    fibers: dict[float, Fiber] = {}
    for q in qs:
        fib = box.fiber(q, -T, T)
        if not fib.covers(UNIT_SPEED_WINDOW[0]):
            raise ConstructionError(
                "fibers", f"box {k} fiber through q={q:.6g} leaves the domain at t={fib.reach_lo:.4g} > -7/4", box=k
            )
        fibers[float(q)] = fib

    worst = -np.inf
    for fib in fibers.values():
        for t in np.linspace(k, T, cfg.t_samples):
            if fib.covers(t):
                worst = max(worst, previous.jet(fib(t)).slope)
    if not worst < -(k + 3):
        raise ConstructionError("E1", f"box {k}: tau_dot reaches {worst:.6g} >= -(k+3) on [k, k+1]", box=k, worst=worst)

    for fib in fibers.values():
        for t in np.linspace(k, T, cfg.disjoint_samples):
            if not fib.covers(t):
                continue
            p = fib(t)
            for other in earlier:
                if other.inverse(p) is not None:
                    raise ConstructionError(
                        "disjointness", f"box {k} exit segment meets box {other.k_index} at {p}", box=k, point=p
                    )

    marked = []
    if earlier:
        for q, fib in fibers.items():
            for t in np.linspace(-1.75, -1.25, cfg.t_samples):
                if any(other.inner_contains(fib(t)) for other in earlier):
                    marked.append((q, float(t)))
    dq = box.outer.length / max(cfg.q_samples - 1, 1)
    cover = _build_cover(coords, box.outer, marked, dq, cfg)

    record = MRecord(tuple(b.k_index for b in earlier), tuple(marked))
    mod = BoxModification(coords, k, cfg.eps_start, box.inner, box.outer, cover, record, box)
    eps, gap = _search_epsilon(mod, fibers, previous, cfg)
    mod.set_eps(eps)

    for q, fib in fibers.items():
        if not fib.covers(T):
            continue
        lhs = mod.tau2(T, q, previous.jet(fib(T))).value
        rhs = mod.A(q) - k - 2.75
        if lhs < rhs - 1e-9:
            raise ConstructionError("step3", f"tau2(k+1, q) = {lhs:.9g} < tau(-1, q) - k - 11/4 = {rhs:.9g}", box=k, q=q)

    logger.info(
        "box %d (level %.6g): eps = %.4g (gap %.3g), %d cover patches over %d marked samples",
        k, box.level, eps, gap, len(cover), len(marked),
    )
    return mod


# ----------------------------------------------------------------- pipeline

def check_dimension(dim: int) -> None:
    if dim != 2:
        raise AdmissionError(f"the construction supports n = 2 only (got n = {dim})")


def construct_prescribed(
    X_raw: VectorField,
    K,
    g: ScalarField,
    U_K: Neighborhood,
    recurrent=None,
    cfg: ConstructConfig = ConstructConfig(),
    base: LyapunovEvaluator | None = None,
) -> PrescribedEvaluator:
    """tau_K with orbital derivative g on K and negative off the recurrent set."""
    check_dimension(X_raw.dim)
    system = prepare_system(X_raw, g, K, U_K, cfg.collar)
    base = base or fixture_base(X_raw.name)
    plan = choose_cover(K, base, recurrent, system.working, cfg)
    C = scale_constant(plan, system.working, cfg)
    current = ScaledEvaluator(base, C, system.working, cfg.flow)
    mods = []
    for k, box in enumerate(plan.boxes, 1):
        try:
            mod = modify_box(current, plan.boxes[: k - 1], box, k, system.working, cfg)
        except (SectionError, BracketError, DomainExitError) as exc:
            raise ConstructionError(f"box {k}", str(exc), box=k) from exc
        current = ModifiedEvaluator(current, mod)
        mods.append(mod)
    logger.info("construction finished: N = %d, C = %.6g", plan.N, C)
    return PrescribedEvaluator(current, system, plan, mods)
