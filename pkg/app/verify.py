from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from app.baselyap import CollocationEvaluator, LyapunovEvaluator, orbital_derivative
from app.construct import BoxModification, ConstructionPlan, PrescribedEvaluator
from app.errors import (
    AdmissionError,
    BracketError,
    CollocationError,
    ConstructionError,
    DomainExitError,
    SectionError,
    StackFormatError,
)
from app.flow import FlowMapConfig, central_flow_difference
from app.sampling import halton_points, map_points
from app.system import ScalarField, VectorField

logger = logging.getLogger(__name__)

# anything the evaluators raise besides a domain exit makes the sample a failure
EVALUATION_ERRORS = (AdmissionError, StackFormatError, BracketError, SectionError, CollocationError, ConstructionError)


@dataclass(frozen=True)
class Tolerances:
    prescription: float = 1e-4  # relative to max |g| on K
    locality: float = 1e-7
    negativity: float = 1e-3
    chart: float = 1e-7
    fd_analytic: float = 1e-4  # relative to max(1, |rate|)
    boundary: float = 1e-9
    seam_order: float = 0.5
    base_residual: float = 5e-2
    samples: int = 1000
    fd_delta: float = 1e-4

    def __post_init__(self) -> None:
        if self.samples < 1 or self.fd_delta <= 0:
            raise ValueError("Sample counts and finite-difference steps must be positive.")


@dataclass(frozen=True)
class CheckResult:
    name: str
    samples: int
    worst: float
    tolerance: float
    passed: bool


@dataclass
class VerificationReport:
    checks: list[CheckResult] = field(default_factory=list)
    provenance: str = "analytic"

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, violations: Sequence[float], tolerance: float, strict: bool = False) -> CheckResult:
        """Record a check; `violations` are per-sample amounts (<= tolerance passes)."""
        worst = float(np.max(violations)) if len(violations) else 0.0
        if not len(violations):
            ok = True
        else:
            ok = worst < tolerance if strict else worst <= tolerance
        result = CheckResult(name, len(violations), worst, tolerance, bool(ok))
        self.checks.append(result)
        log = logger.info if result.passed else logger.warning
        log("check %-22s n=%-5d worst=%.3e tol=%.1e %s", name, result.samples, worst, tolerance, "pass" if ok else "FAIL")
        return result

    def get(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "check": [c.name for c in self.checks],
                "worst": [c.worst for c in self.checks],
                "tolerance": [c.tolerance for c in self.checks],
                "pass": ["pass" if c.passed else "fail" for c in self.checks],
            }
        )

    def lines(self) -> str:
        """Machine format: check_name worst_violation tolerance pass."""
        return self.frame().to_csv(sep=" ", header=False, index=False, float_format="%.17g")

    def summary(self) -> str:
        rows = [f"verdict: {'PASS' if self.passed else 'FAIL'}", f"base provenance: {self.provenance}"]
        for c in self.checks:
            rows.append(
                f"  {c.name:<22} samples={c.samples:<6d} worst={c.worst:.3e} tol={c.tolerance:.1e} "
                f"{'pass' if c.passed else 'FAIL'}"
            )
        return "\n".join(rows)

    def write(self, out_dir: Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        machine = out_dir / "report.txt"
        human = out_dir / "report_summary.txt"
        machine.write_text(self.lines(), encoding="utf-8")
        human.write_text(self.summary() + "\n", encoding="utf-8")
        return machine, human


def fd_orbital_derivative(
    tau: LyapunovEvaluator,
    X: VectorField,
    p: np.ndarray,
    delta: float = 1e-4,
    cfg: FlowMapConfig = FlowMapConfig(),
) -> float:
    """(tau(Phi_d p) - tau(Phi_-d p)) / 2d with one Richardson step over (d, d/2)."""
    return central_flow_difference(tau.value, X, np.asarray(p, dtype=float), delta, cfg, richardson=True)


def _safe(fn: Callable) -> Callable:
    """None where the orbit leaves the domain, inf where evaluation breaks down."""

    def wrapped(*args):
        try:
            return fn(*args)
        except DomainExitError:
            return None
        except EVALUATION_ERRORS as exc:
            logger.warning("evaluation failed at %s: %s", args, exc)
            return np.inf

    return wrapped


def _finite(values: list) -> np.ndarray:
    return np.array([v for v in values if v is not None], dtype=float)


def _definition_rates(
    tau: LyapunovEvaluator,
    X: VectorField,
    points: np.ndarray,
    critical: Callable[[np.ndarray], bool] | None,
    cfg: FlowMapConfig,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """tau_dot at the points whose orbit stays in the domain, and which of them lie off the critical set."""
    raw = map_points(_safe(lambda p: orbital_derivative(tau, X, p, cfg)), points, threads)
    kept = [i for i, v in enumerate(raw) if v is not None]
    rates = np.array([raw[i] for i in kept], dtype=float)
    off = np.array([critical is None or not critical(points[i]) for i in kept], dtype=bool)
    return rates, off


def lyapunov_definition_check(
    tau: LyapunovEvaluator,
    X: VectorField,
    points: np.ndarray,
    critical: Callable[[np.ndarray], bool] | None = None,
    cfg: FlowMapConfig = FlowMapConfig(),
    threads: int = 1,
) -> tuple[float, float]:
    """(max tau_dot, max tau_dot off the critical set); a Lyapunov function has both <= 0, the second < 0."""
    rates, off = _definition_rates(tau, X, points, critical, cfg, threads)
    return float(rates.max(initial=-np.inf)), float(rates[off].max(initial=-np.inf))


def _box_samples(plan: ConstructionPlan, n: int, seed: int) -> list[tuple[int, float, float]]:
    """(box index, t, q) quasi-random over each (-T, T) x W."""
    out = []
    for i, box in enumerate(plan.boxes):
        u = halton_points(n, 2, seed + 17 * (i + 1))
        T = box.half_width
        W = box.outer
        for a, b in u:
            out.append((i, T * (2 * a - 1) * 0.999, W.lo + b * (W.hi - W.lo)))
    return out


def scale_violations(
    plan: ConstructionPlan,
    working: VectorField,
    seed: int = 0,
    cfg: FlowMapConfig = FlowMapConfig(),
    n: int = 64,
    threads: int = 1,
) -> list[float]:
    """C tau_dot' + N + 3 at quasi-random box points; all negative when the scale constant is large enough."""

    def one(sample):
        i, t, q = sample
        p = plan.boxes[i].chart(t, q)
        return plan.scale * orbital_derivative(plan.base, working, p, cfg) + plan.N + 3

    return list(_finite(map_points(_safe(one), _box_samples(plan, n, seed), threads)))


def _exit_samples(mod: BoxModification, n: int, seed: int) -> tuple[np.ndarray, list[tuple[float, float]]]:
    """q over W for the exit inequality, (t, q) over [k+1-2eps, k+1] x W for the step-3 gap."""
    W, top = mod.outer, mod.k + 1.0
    u = halton_points(n, 2, seed + 29 * mod.k)
    qs = W.lo + u[:, 0] * (W.hi - W.lo)
    band = [(top - 2 * mod.eps * a, W.lo + b * (W.hi - W.lo)) for a, b in u]
    return qs, band


def _boundary_samples(mod: BoxModification, n: int, seed: int) -> list[tuple[float, float]]:
    """(t, q) on the relative boundary of the box: the two end sections and, for open W, the two side strips."""
    W, top = mod.outer, 0.999 * (mod.k + 1.0)
    u = halton_points(n, 2, seed + 37 * mod.k)
    out = []
    for i, (a, b) in enumerate(u):
        face = i % (2 if W.closed else 4)
        if face < 2:
            out.append((top if face else -top, W.lo + b * (W.hi - W.lo)))
        else:
            out.append((top * (2 * a - 1), W.hi if face == 3 else W.lo))
    return out


def _seam_samples(mod: BoxModification, n: int, seed: int) -> list[tuple[float, float]]:
    """(t, q) across every blend: the mu ramps in t, the nu2 margins and nu1 patch supports in q."""
    W, top = mod.outer, mod.k + 1.0
    t_seams = [-1.75, -1.375, -1.0, top - 2 * mod.eps, top - 1.5 * mod.eps, top - mod.eps]
    q_seams = []
    if mod.nu2_margin is not None:
        for d in (0.25, 0.5, 0.75):
            q_seams += [mod.inner.lo - d * mod.nu2_margin, mod.inner.hi + d * mod.nu2_margin]
    for patch in mod.cover:
        for d in (0.5, 0.75, 1.0):
            q_seams += [W.wrap(patch.center - d * patch.radius), W.wrap(patch.center + d * patch.radius)]
    q_seams = [q for q in q_seams if W.contains_param(q, closure=True)]
    u = halton_points(n, 2, seed + 41 * mod.k)
    out = []
    for i, (a, b) in enumerate(u):
        if q_seams and i % 2:
            out.append((0.999 * top * (2 * a - 1), q_seams[(i // 2) % len(q_seams)]))
        else:
            out.append((t_seams[(i // 2) % len(t_seams)], W.lo + b * (W.hi - W.lo)))
    return out


def verify_report(
    tau_K: PrescribedEvaluator,
    X_raw: VectorField,
    K,
    g: ScalarField,
    plan: ConstructionPlan | None = None,
    seed: int = 0,
    tolerances: Tolerances = Tolerances(),
    recurrent=None,
    inflate: float = 0.0,
    threads: int = 1,
    cfg: FlowMapConfig = FlowMapConfig(),
) -> VerificationReport:
    plan = plan or tau_K.plan
    tol = tolerances
    n = tol.samples
    base = plan.base
    report = VerificationReport(provenance=base.provenance)
    working = tau_K.system.working
    C = plan.scale

    # prescription on K
    k_pts = K.sample(n, seed) if not K.is_empty else np.empty((0, X_raw.dim))
    g_scale = float(np.max(np.abs(g(k_pts)))) if len(k_pts) else 1.0
    fd = _finite(map_points(_safe(lambda p: fd_orbital_derivative(tau_K, X_raw, p, tol.fd_delta, cfg) - g(p)), k_pts, threads))
    report.add("prescription", np.abs(fd) / g_scale, tol.prescription)

    # locality and negativity over the domain
    dom = X_raw.domain.sample(n, seed + 1)
    outside = [p for p in dom if not plan.outer_contains(p)]
    loc = _finite(map_points(_safe(lambda p: abs(tau_K.value(p) - C * base.value(p))), outside, threads))
    report.add("locality", loc, tol.locality)

    if recurrent is not None and not recurrent.is_empty:
        near = np.asarray(recurrent.distance(dom)) <= inflate
        dom_off = dom[~near]

        def critical(p):
            return float(recurrent.distance(p)) <= inflate
    else:
        dom_off = dom
        critical = None
    rates = _finite(map_points(_safe(tau_K.rate), dom_off, threads))
    report.add("negativity", rates + tol.negativity, 0.0, strict=True)

    # tau_dot <= 0 everywhere sampled, < 0 off the inflated recurrent cells
    all_rates, off = _definition_rates(tau_K, X_raw, dom, critical, cfg, threads)
    report.add("lyapunov_definition", np.where(off & (all_rates >= 0.0), np.inf, all_rates), 0.0)

    # per-modification invariants
    violations = [v for mod in tau_K.modifications for v in mod.invariant_violations()]
    for v in violations:
        logger.warning("modification parameter: %s", v)
    report.add("modification_params", [float(len(violations))], 0.0)

    ineq, gaps, bound = [], [], []
    for mod in tau_K.modifications:
        k, top = mod.k, mod.k + 1.0
        qs, band = _exit_samples(mod, n, seed + 4)

        def exit_gap(q, mod=mod, k=k, top=top):
            return mod.A(q) - k - 2.75 - mod.tau2(top, q, mod.coords.jet(top, q)).value

        def step3_gap(tq, mod=mod):
            tau = mod.coords.jet(*tq)
            return tau.value - mod.tau2(*tq, tau).value

        def boundary_gap(tq, mod=mod):
            tau = mod.coords.jet(*tq)
            return abs(mod.jet(*tq, tau).value - tau.value)

        ineq += list(_finite(map_points(_safe(exit_gap), qs, threads)))
        gaps += list(_finite(map_points(_safe(step3_gap), band, threads)))
        bound += list(_finite(map_points(_safe(boundary_gap), _boundary_samples(mod, n, seed + 5), threads)))
    report.add("exit_inequality", ineq, 1e-9)
    report.add("step3_gap", gaps, 0.0, strict=True)
    report.add("boundary", bound, tol.boundary)

    # chart round trip
    def round_trip(sample):
        i, t, q = sample
        box = plan.boxes[i]
        hit = box.inverse(box.chart(t, q))
        return np.inf if hit is None else abs(hit[0] - t) + box.outer.param_distance(hit[1], q)

    trips = _finite(map_points(_safe(round_trip), _box_samples(plan, n, seed + 2), threads))
    report.add("chart_round_trip", trips, tol.chart)

    # analytic vs flow-difference derivative, relative to the size of the rate
    check_pts = list(k_pts) + list(dom)

    def fd_gap(p):
        rate = tau_K.rate(p)
        return abs(fd_orbital_derivative(tau_K, X_raw, p, tol.fd_delta, cfg) - rate) / max(1.0, abs(rate))

    diffs = _finite(map_points(_safe(fd_gap), check_pts, threads))
    report.add("fd_vs_analytic", diffs, tol.fd_analytic)

    # seams: central differences converge at second order through every blend
    def seam_order(sample):
        box, t, q = sample
        p = box.chart(t, q)
        exact = tau_K.jet(p).slope
        errs = [
            abs(central_flow_difference(tau_K.top.value, working, p, d, cfg, richardson=False) - exact)
            for d in (2e-2, 1e-2, 5e-3)
        ]
        if min(errs[:2]) <= 1e-5 * max(1.0, abs(exact)):
            return 0.0
        # leading error terms can cancel at one step pair, never at both
        order = max(np.log2(errs[0] / max(errs[1], 1e-300)), np.log2(errs[1] / max(errs[2], 1e-300)))
        return max(0.0, 2.0 - float(order))

    seams = [(mod.box, t, q) for mod in tau_K.modifications for t, q in _seam_samples(mod, n, seed + 6)]
    orders = _finite(map_points(_safe(seam_order), seams, threads))
    report.add("seam_order", orders, tol.seam_order)

    report.add("scale_constant", scale_violations(plan, working, seed + 3, cfg, n, threads), 0.0, strict=True)

    # base residual (collocation only)
    if isinstance(base, CollocationEvaluator):
        res = _finite(map_points(_safe(lambda p: abs(orbital_derivative(base, X_raw, p, cfg) + 1.0)), dom_off, threads))
        report.add("base_residual", res, tol.base_residual)

    logger.info("verification %s", "passed" if report.passed else "FAILED")
    return report
