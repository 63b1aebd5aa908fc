"""Plain-text plan / modification-stack files.

Layout (one record per line, numbers in %.17g):

    lyapunov-stack 1
    base fixture linear_sink          (or: base collocation path/to/model.txt)
    scale C
    boxes N
    box k level half_width closed lo hi inner_lo inner_hi m
    x y q                              (m lines: the section polyline)
    modification k eps patches marked
    patch center time radius level     (one line per patch)
    earlier i j ...
    marked q t                         (one line per marked sample)
    end

The evaluation grid export is one "x y tau taudot" line per point.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd

from app.baselyap import LyapunovEvaluator
from app.construct import (
    BoxModification,
    ConstructionPlan,
    CoverPatch,
    ModifiedEvaluator,
    MRecord,
    PrescribedEvaluator,
    ScaledEvaluator,
    StackedBoxFunction,
)
from app.errors import DomainExitError, StackFormatError
from app.flow import FlowBox, FlowMapConfig, Section
from app.sampling import map_points
from app.system import WorkingSystem

FORMAT = "lyapunov-stack"
VERSION = 1


def _num(x: float) -> str:
    return "%.17g" % x


def stack_lines(tau_K: PrescribedEvaluator, base_ref: tuple[str, str]) -> list[str]:
    plan = tau_K.plan
    lines = [f"{FORMAT} {VERSION}", f"base {base_ref[0]} {base_ref[1]}", f"scale {_num(plan.scale)}", f"boxes {plan.N}"]
    for box in plan.boxes:
        W, V = box.outer, box.inner
        lines.append(
            " ".join(
                ["box", str(box.k_index), _num(box.level), _num(box.half_width), str(int(W.closed))]
                + [_num(v) for v in (W.lo, W.hi, V.lo, V.hi)]
                + [str(len(W.points))]
            )
        )
        for pt, q in zip(W.points, W.params):
            lines.append(" ".join(_num(v) for v in (*pt, q)))
    for mod in tau_K.modifications:
        lines.append(f"modification {mod.k} {_num(mod.eps)} {len(mod.cover)} {len(mod.M_record.marked)}")
        for p in mod.cover:
            lines.append(" ".join(["patch"] + [_num(v) for v in (p.center, p.time, p.radius, p.level)]))
        lines.append(" ".join(["earlier"] + [str(i) for i in mod.M_record.earlier]))
        for q, t in mod.M_record.marked:
            lines.append(f"marked {_num(q)} {_num(t)}")
    lines.append("end")
    return lines


def save_stack(tau_K: PrescribedEvaluator, path: Path, base_ref: tuple[str, str]) -> Path:
    path = Path(path)
    path.write_text("\n".join(stack_lines(tau_K, base_ref)) + "\n", encoding="utf-8")
    return path


class _Reader:
    def __init__(self, text: str, source: str) -> None:
        self._lines: Iterator[tuple[int, str]] = iter(
            [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines()) if ln.strip()]
        )
        self.source = source

    def next(self, keyword: str | None = None, count: int | None = None) -> list[str]:
        try:
            lineno, line = next(self._lines)
        except StopIteration:
            raise StackFormatError(f"{self.source}: unexpected end of file (wanted {keyword or 'data'})") from None
        parts = line.split()
        if keyword is not None:
            if parts[0] != keyword:
                raise StackFormatError(f"{self.source}:{lineno}: expected '{keyword}', found '{parts[0]}'")
            parts = parts[1:]
        if count is not None and len(parts) != count:
            raise StackFormatError(f"{self.source}:{lineno}: expected {count} fields, found {len(parts)}")
        self.lineno = lineno
        return parts

    def floats(self, parts: list[str]) -> list[float]:
        try:
            return [float(x) for x in parts]
        except ValueError as exc:
            raise StackFormatError(f"{self.source}:{self.lineno}: {exc}") from None

    def ints(self, parts: list[str]) -> list[int]:
        try:
            return [int(x) for x in parts]
        except ValueError as exc:
            raise StackFormatError(f"{self.source}:{self.lineno}: {exc}") from None


def read_base_ref(path: Path) -> tuple[str, str]:
    """The (kind, reference) of the base a stack file was built on."""
    r = _Reader(Path(path).read_text(encoding="utf-8"), str(path))
    _header(r)
    kind, ref = r.next("base", 2)
    return kind, ref


def _header(r: _Reader) -> None:
    parts = r.next()
    if len(parts) != 2 or parts[0] != FORMAT:
        raise StackFormatError(f"{r.source}: not a {FORMAT} file")
    if parts[1] != str(VERSION):
        raise StackFormatError(f"{r.source}: unsupported {FORMAT} version {parts[1]} (this build reads {VERSION})")


def load_stack(
    path: Path,
    system: WorkingSystem,
    base: LyapunovEvaluator,
    cfg: FlowMapConfig = FlowMapConfig(),
) -> PrescribedEvaluator:
    """Rebuild tau_K from a stack file; the system and base must be the ones it was built with."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise StackFormatError(f"{path}: {exc}") from exc
    r = _Reader(text, str(path))
    _header(r)
    r.next("base", 2)
    (scale,) = r.floats(r.next("scale", 1))
    (n_boxes,) = r.ints(r.next("boxes", 1))
    X = system.working

    boxes = []
    for _ in range(n_boxes):
        parts = r.next("box", 9)
        k, closed, m = int(parts[0]), parts[3] == "1", int(parts[8])
        level, half_width = r.floats(parts[1:3])
        lo, hi, inner_lo, inner_hi = r.floats(parts[4:8])
        rows = np.array([r.floats(r.next(count=3)) for _ in range(m)])
        outer = Section(level, base, rows[:, :2], rows[:, 2], closed, lo, hi)
        inner = outer if closed else Section(level, base, rows[:, :2], rows[:, 2], False, inner_lo, inner_hi)
        try:
            boxes.append(FlowBox(inner, outer, half_width, k, X, cfg))
        except ValueError as exc:
            raise StackFormatError(f"{path}: box {k}: {exc}") from exc
    plan = ConstructionPlan(boxes, base, scale)

    current = ScaledEvaluator(base, scale, X, cfg)
    mods = []
    for box in boxes:
        parts = r.next("modification", 4)
        k, n_patches, n_marked = int(parts[0]), int(parts[2]), int(parts[3])
        (eps,) = r.floats(parts[1:2])
        if k != box.k_index:
            raise StackFormatError(f"{path}: modification {k} out of order (expected {box.k_index})")
        patches = tuple(CoverPatch(*r.floats(r.next("patch", 4))) for _ in range(n_patches))
        earlier = tuple(r.ints(r.next("earlier")))
        marked = tuple(tuple(r.floats(r.next("marked", 2))) for _ in range(n_marked))
        try:
            mod = BoxModification(
                StackedBoxFunction(box, current), k, eps, box.inner, box.outer, patches, MRecord(earlier, marked), box
            )
        except ValueError as exc:
            raise StackFormatError(f"{path}: modification {k}: {exc}") from exc
        current = ModifiedEvaluator(current, mod)
        mods.append(mod)
    r.next("end", 0)
    return PrescribedEvaluator(current, system, plan, mods)


def grid_frame(tau_K: PrescribedEvaluator, domain, n: int, threads: int = 1) -> pd.DataFrame:
    """tau_K and its rate along the raw field on an n x n grid, x varying fastest."""
    xs = np.linspace(domain.lo[0], domain.hi[0], n)
    ys = np.linspace(domain.lo[1], domain.hi[1], n)
    pts = np.array([(x, y) for y in ys for x in xs])

    def row(p: np.ndarray) -> tuple[float, float]:
        try:
            return tau_K.value(p), tau_K.rate(p)
        except DomainExitError:
            return float("nan"), float("nan")

    values = np.array(map_points(row, pts, threads), dtype=float).reshape(-1, 2)
    return pd.DataFrame({"x": pts[:, 0], "y": pts[:, 1], "tau": values[:, 0], "taudot": values[:, 1]})


def export_grid(tau_K: PrescribedEvaluator, domain, n: int, path: Path, threads: int = 1) -> Path:
    path = Path(path)
    grid_frame(tau_K, domain, n, threads).to_csv(path, sep=" ", header=False, index=False, float_format="%.17g")
    return path
