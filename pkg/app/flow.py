from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq, minimize_scalar

from app.errors import AdmissionError, BracketError, DomainExitError, SectionError
from app.system import VectorField

logger = logging.getLogger(__name__)

UNIT_SPEED_WINDOW = (-1.75, -1.0)


@dataclass(frozen=True)
class FlowMapConfig:
    abs_tol: float = 1e-10
    rel_tol: float = 1e-10
    max_step: float = np.inf
    method: str = "DOP853"

    def __post_init__(self) -> None:
        if self.abs_tol <= 0 or self.rel_tol <= 0:
            raise ValueError("Integrator tolerances must be positive.")
        if self.method not in ("RK45", "DOP853"):
            raise ValueError(f"Unsupported integrator {self.method!r}; use RK45 or DOP853.")
        if self.max_step <= 0:
            raise ValueError("max_step must be positive.")

    def solver_kwargs(self) -> dict:
        return {"method": self.method, "rtol": self.rel_tol, "atol": self.abs_tol, "max_step": self.max_step}


class LevelFunction(Protocol):
    def value(self, p: np.ndarray) -> float: ...

    def gradient(self, p: np.ndarray) -> np.ndarray | None: ...


def _exit_event(X: VectorField) -> Callable:
    def event(t, y):
        return X.domain.margin(y)

    event.terminal = True
    event.direction = -1
    return event


def _rhs(X: VectorField) -> Callable:
    return lambda t, y: X(y)


def flow_map(X: VectorField, p: np.ndarray, t: float, cfg: FlowMapConfig = FlowMapConfig()) -> np.ndarray:
    """Phi_t(p); raises DomainExitError when the orbit leaves the domain box first."""
    p = np.asarray(p, dtype=float)
    if t == 0:
        return p.copy()
    sol = solve_ivp(_rhs(X), (0.0, float(t)), p, events=[_exit_event(X)], **cfg.solver_kwargs())
    if sol.status == 1:
        raise DomainExitError(sol.t_events[0][0], sol.y_events[0][0])
    if sol.status < 0:
        raise RuntimeError(f"integration failed: {sol.message}")
    return sol.y[:, -1]


class Fiber:
    """Dense orbit segment t -> Phi_t(p) on [t_lo, t_hi], truncated where the orbit leaves the domain."""

    def __init__(self, X: VectorField, p: np.ndarray, t_lo: float, t_hi: float, cfg: FlowMapConfig) -> None:
        self.origin = np.asarray(p, dtype=float)
        self._forward = None
        self._backward = None
        self.reach_lo, self.reach_hi = 0.0, 0.0
        if t_hi > 0:
            self._forward, self.reach_hi = self._integrate(X, t_hi, cfg)
        if t_lo < 0:
            self._backward, self.reach_lo = self._integrate(X, t_lo, cfg)
        self.truncated = self.reach_lo > t_lo or self.reach_hi < t_hi
        self.t_lo, self.t_hi = t_lo, t_hi

    def _integrate(self, X: VectorField, t_end: float, cfg: FlowMapConfig):
        sol = solve_ivp(
            _rhs(X), (0.0, float(t_end)), self.origin, events=[_exit_event(X)], dense_output=True, **cfg.solver_kwargs()
        )
        if sol.status < 0:
            raise RuntimeError(f"integration failed: {sol.message}")
        reach = float(sol.t_events[0][0]) if sol.status == 1 else float(t_end)
        return sol.sol, reach

    def covers(self, t: float) -> bool:
        return self.reach_lo <= t <= self.reach_hi

    def __call__(self, t: float) -> np.ndarray:
        if not self.covers(t):
            raise DomainExitError(self.reach_hi if t > 0 else self.reach_lo, None)
        if t == 0:
            return self.origin.copy()
        return (self._forward if t > 0 else self._backward)(t)


def flow_fiber(X: VectorField, p: np.ndarray, t_lo: float, t_hi: float, cfg: FlowMapConfig = FlowMapConfig()) -> Fiber:
    return Fiber(X, p, t_lo, t_hi, cfg)


def central_flow_difference(
    value: Callable[[np.ndarray], float],
    X: VectorField,
    p: np.ndarray,
    delta: float,
    cfg: FlowMapConfig = FlowMapConfig(),
    richardson: bool = True,
) -> float:
    """(v(Phi_d p) - v(Phi_-d p)) / 2d, with one Richardson step over (d, d/2)."""
    if delta <= 0:
        raise ValueError("delta must be positive.")
    fib = Fiber(X, p, -delta, delta, cfg)
    if fib.truncated:
        raise DomainExitError(fib.reach_hi if fib.reach_hi < delta else fib.reach_lo, p)
    d1 = (value(fib(delta)) - value(fib(-delta))) / (2 * delta)
    if not richardson:
        return d1
    h = delta / 2
    d2 = (value(fib(h)) - value(fib(-h))) / (2 * h)
    return (4 * d2 - d1) / 3


def level_crossing(
    X: VectorField,
    tau: LevelFunction,
    p: np.ndarray,
    s: float,
    t_max: float,
    cfg: FlowMapConfig = FlowMapConfig(),
) -> tuple[float, np.ndarray] | None:
    """First time sigma in [0, t_max] (t_max may be negative) with tau(Phi_sigma(p)) = s, or None."""
    p = np.asarray(p, dtype=float)
    if abs(tau.value(p) - s) <= 1e-13 * (1.0 + abs(s)):
        return 0.0, p.copy()

    def level(t, y):
        return tau.value(y) - s

    level.terminal = True
    sol = solve_ivp(_rhs(X), (0.0, float(t_max)), p, events=[level, _exit_event(X)], **cfg.solver_kwargs())
    if sol.status < 0:
        raise RuntimeError(f"integration failed: {sol.message}")
    if len(sol.t_events[0]) == 0:
        return None
    sigma, y = float(sol.t_events[0][0]), np.asarray(sol.y_events[0][0], dtype=float)
    # one Newton step along the orbit to polish the event location
    grad = tau.gradient(y)
    if grad is not None:
        rate = float(grad @ X(y))
        if rate != 0.0:
            dt = -(tau.value(y) - s) / rate
            if dt != 0.0 and abs(dt) < 1e-3:
                y = flow_map(X, y, dt, cfg)
                sigma += dt
    return sigma, y


# ------------------------------------------------------------------ sections

def _newton_onto_level(tau: LevelFunction, y: np.ndarray, s: float, iters: int = 8) -> np.ndarray:
    for _ in range(iters):
        r = tau.value(y) - s
        if abs(r) <= 1e-14 * (1.0 + abs(s)):
            break
        g = tau.gradient(y)
        y = y - r * g / float(g @ g)
    return y


@dataclass(eq=False)
class Section:
    """Patch of the level set {tau = level}: an arc-length polyline projected back onto the level.

    Parameters live in [lo, hi]; closed sections are periodic with period `period`.
    """

    level: float
    tau: LevelFunction
    points: np.ndarray
    params: np.ndarray
    closed: bool = False
    lo: float = field(default=np.nan)
    hi: float = field(default=np.nan)

    def __post_init__(self) -> None:
        if np.isnan(self.lo):
            self.lo = float(self.params[0])
        if np.isnan(self.hi):
            self.hi = float(self.params[-1])
        self._seg_a = self.points[:-1]
        self._seg_d = np.diff(self.points, axis=0)
        self._seg_len = np.diff(self.params)

    @property
    def period(self) -> float:
        return float(self.params[-1] - self.params[0])

    @property
    def length(self) -> float:
        return self.period if self.closed else self.hi - self.lo

    def wrap(self, q: float) -> float:
        if not self.closed:
            return float(q)
        return float(self.params[0] + np.mod(q - self.params[0], self.period))

    def contains_param(self, q: float, closure: bool = False) -> bool:
        if self.closed:
            return True
        return self.lo <= q <= self.hi if closure else self.lo < q < self.hi

    def dist_outside(self, q: float) -> float:
        """Parameter distance from q to [lo, hi]; 0 on closed sections."""
        if self.closed:
            return 0.0
        return max(self.lo - q, q - self.hi, 0.0)

    def param_distance(self, a: float, b: float) -> float:
        d = abs(a - b)
        if self.closed:
            d = np.mod(d, self.period)
            d = min(d, self.period - d)
        return float(d)

    def param_grid(self, m: int) -> np.ndarray:
        if self.closed:
            return self.params[0] + self.period * np.arange(m) / m
        return np.linspace(self.lo, self.hi, m)

    def restrict(self, lo: float, hi: float) -> "Section":
        if self.closed:
            return self
        if not self.lo <= lo < hi <= self.hi:
            raise ValueError(f"[{lo}, {hi}] is not inside the section domain [{self.lo}, {self.hi}]")
        return Section(self.level, self.tau, self.points, self.params, False, lo, hi)

    def chart(self, q: float) -> np.ndarray:
        q = self.wrap(q)
        y = np.array([np.interp(q, self.params, self.points[:, i]) for i in range(self.points.shape[1])])
        return _newton_onto_level(self.tau, y, self.level)

    def param_of(self, y: np.ndarray) -> tuple[float, float]:
        """Parameter of the section point nearest to y, and the distance to it."""
        y = np.asarray(y, dtype=float)
        seg2 = np.einsum("ij,ij->i", self._seg_d, self._seg_d)
        lam = np.clip(np.einsum("ij,ij->i", y - self._seg_a, self._seg_d) / np.where(seg2 > 0, seg2, 1.0), 0.0, 1.0)
        foot = self._seg_a + lam[:, None] * self._seg_d
        i = int(np.argmin(np.linalg.norm(foot - y, axis=1)))
        q0 = float(self.params[i] + lam[i] * self._seg_len[i])
        width = float(self._seg_len[i]) if self._seg_len[i] > 0 else 1e-6
        a, b = q0 - width, q0 + width
        if not self.closed:
            a, b = max(a, float(self.params[0])), min(b, float(self.params[-1]))
        res = minimize_scalar(
            lambda q: float(np.sum((self.chart(q) - y) ** 2)), bounds=(a, b), method="bounded", options={"xatol": 1e-13}
        )
        q = self.wrap(float(res.x))
        return q, float(np.sqrt(res.fun))


def _trace_direction(
    tau: LevelFunction,
    X: VectorField,
    y0: np.ndarray,
    s: float,
    sign: float,
    length_budget: float,
    step: float,
    max_dev: float,
    avoid,
    avoid_margin: float,
    target: np.ndarray,
) -> tuple[list[np.ndarray], list[float], bool]:
    """Follow the level set from y0; stops early (closed) on coming back to `target`."""
    pts, arcs = [y0], [0.0]
    length, h = 0.0, step
    while length < length_budget - 1e-12:
        y = pts[-1]
        g = tau.gradient(y)
        tangent = sign * np.array([-g[1], g[0]]) / np.linalg.norm(g)
        hh = min(h, length_budget - length)
        while True:
            cand = _newton_onto_level(tau, y + hh * tangent, s)
            mid = 0.5 * (y + cand)
            gm = tau.gradient(mid)
            dev = abs(tau.value(mid) - s) / max(float(np.linalg.norm(gm)), 1e-300)
            if dev <= max_dev:
                break
            hh *= 0.5
            if hh < 1e-9:
                raise SectionError(f"cannot follow the level set {s:.6g} near {y}")
        if X.domain.margin(cand) < 0:
            raise SectionError(f"level set {s:.6g} reaches the domain boundary at {cand}")
        if avoid is not None and avoid.distance(cand) < avoid_margin:
            raise SectionError(f"level set {s:.6g} comes within {avoid_margin:g} of the recurrent cells at {cand}")
        if length > 4 * step and np.linalg.norm(cand - target) <= step:
            pts.append(np.array(target, dtype=float))
            arcs.append(length + float(np.linalg.norm(target - y)))
            return pts, arcs, True
        length += float(np.linalg.norm(cand - y))
        pts.append(cand)
        arcs.append(length)
        h = min(2.0 * hh, step) if dev < 0.25 * max_dev else hh
    return pts, arcs, False


def section_from_level(
    tau: LevelFunction,
    s: float,
    seed: np.ndarray,
    extent: float,
    X: VectorField,
    cfg: FlowMapConfig = FlowMapConfig(),
    *,
    avoid=None,
    avoid_margin: float = 0.0,
    step: float | None = None,
    max_dev: float = 1e-6,
    search_time: float = 10.0,
) -> Section:
    """Trace {tau = s} through the seed (corrected along its orbit) to arc length `extent` each way.

    Parameters are arc length with 0 at the corrected seed. A curve that comes back
    on itself within the traced length gives a closed section.
    """
    seed = np.asarray(seed, dtype=float)
    if seed.shape[0] != 2:
        raise AdmissionError(f"sections are traced for n = 2 only (got n = {seed.shape[0]})")
    if extent <= 0:
        raise ValueError("Section extent must be positive.")
    g = tau.gradient(seed)
    if g is None or float(g @ X(seed)) >= 0:
        raise SectionError(f"tau is not strictly decreasing along the orbit at the seed {seed}")
    direction = search_time if tau.value(seed) > s else -search_time
    hit = level_crossing(X, tau, seed, s, direction, cfg)
    if hit is None:
        raise SectionError(f"the orbit of {seed} does not reach the level {s:.6g}")
    y0 = _newton_onto_level(tau, hit[1], s)
    h = step or min(extent / 50.0, 0.05)
    args = (max_dev, avoid, avoid_margin)
    fwd, fwd_arc, closed = _trace_direction(tau, X, y0, s, 1.0, extent, h, *args, target=y0)
    if closed:
        logger.debug("section at level %.6g closes after arc length %.4g", s, fwd_arc[-1])
        return Section(s, tau, np.array(fwd), np.array(fwd_arc), closed=True)
    bwd, bwd_arc, closed = _trace_direction(tau, X, y0, s, -1.0, extent, h, *args, target=fwd[-1])
    if closed:
        # bwd runs from the seed back round to the far end of fwd
        points = np.array(bwd[::-1] + fwd[1:])
        params = np.concatenate([bwd_arc[-1] - np.array(bwd_arc[::-1]), bwd_arc[-1] + np.array(fwd_arc[1:])])
        logger.debug("section at level %.6g closes after arc length %.4g", s, params[-1])
        return Section(s, tau, points, params, closed=True)
    points = np.array(bwd[:0:-1] + fwd)
    params = np.array([-a for a in bwd_arc[:0:-1]] + fwd_arc)
    return Section(s, tau, points, params)


# ----------------------------------------------------------------- flow boxes

@dataclass(eq=False)
class FlowBox:
    """Phi((-T, T) x W) with the inner section V inside W; T = half_width."""

    inner: Section
    outer: Section
    half_width: float
    k_index: int
    field: VectorField
    cfg: FlowMapConfig = field(default_factory=FlowMapConfig)

    def __post_init__(self) -> None:
        if self.inner.level != self.outer.level:
            raise ValueError("Inner and outer sections must lie on the same level.")
        if not self.outer.closed and not (self.outer.lo < self.inner.lo and self.inner.hi < self.outer.hi):
            raise ValueError("The inner section closure must lie inside the outer section.")

    @property
    def level(self) -> float:
        return self.outer.level

    def chart(self, t: float, q: float) -> np.ndarray:
        return box_chart(self, t, q, self.field, self.cfg)

    def inverse(self, p: np.ndarray, half_width: float | None = None, inner: bool = False):
        return box_chart_inverse(self, p, self.field, self.cfg, half_width=half_width, inner=inner)

    def fiber(self, q: float, t_lo: float, t_hi: float) -> Fiber:
        return Fiber(self.field, self.outer.chart(q), t_lo, t_hi, self.cfg)

    def inner_contains(self, p: np.ndarray) -> bool:
        """p in the closure of Phi((-1, 1) x V)."""
        return self.inverse(p, half_width=1.0, inner=True) is not None


def box_chart(box: FlowBox, t: float, q: float, X: VectorField | None = None, cfg: FlowMapConfig | None = None) -> np.ndarray:
    """Phi_t(W.chart(q))."""
    return flow_map(X or box.field, box.outer.chart(q), t, cfg or box.cfg)


def box_chart_inverse(
    box: FlowBox,
    p: np.ndarray,
    X: VectorField | None = None,
    cfg: FlowMapConfig | None = None,
    *,
    half_width: float | None = None,
    inner: bool = False,
) -> tuple[float, float] | None:
    """(t, q) with p = Phi_t(chart(q)), |t| <= half_width; None when p is not in the box."""
    X = X or box.field
    cfg = cfg or box.cfg
    T = box.half_width if half_width is None else half_width
    section = box.inner if inner else box.outer
    tau, s = section.tau, section.level
    p = np.asarray(p, dtype=float)
    budget = T if tau.value(p) > s else -T
    hit = level_crossing(X, tau, p, s, budget, cfg)
    if hit is None:
        return None
    sigma, y = hit
    q, dist = section.param_of(y)
    if dist > 1e-6 or not section.contains_param(q, closure=inner):
        return None
    return -sigma, q


def level_time(
    tau: LevelFunction,
    box: FlowBox,
    q: float,
    c: float,
    window: tuple[float, float] = UNIT_SPEED_WINDOW,
    fiber: Fiber | None = None,
) -> float:
    """The unique u in window with tau(Phi_u(chart(q))) = c."""
    lo, hi = window
    fib = fiber or box.fiber(q, min(lo, 0.0), max(hi, 0.0))
    if not (fib.covers(lo) and fib.covers(hi)):
        raise BracketError(f"the fiber through q={q:.6g} leaves the domain inside {window}")

    def gap(u: float) -> float:
        return tau.value(fib(u)) - c

    g_lo, g_hi = gap(lo), gap(hi)
    if g_lo == 0.0:
        return lo
    if g_hi == 0.0:
        return hi
    if not (g_lo > 0 > g_hi):
        raise BracketError(f"level {c:.9g} is not bracketed on {window} at q={q:.6g} ({g_lo:.3g}, {g_hi:.3g})")
    return float(brentq(gap, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps))
