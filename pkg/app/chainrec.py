from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np
import pandas as pd
from scipy import sparse
from scipy.integrate import solve_ivp
from scipy.sparse.csgraph import breadth_first_order, connected_components

from app.bumps import SmoothStep
from app.flow import FlowMapConfig
from app.regions import Box
from app.sampling import map_points
from app.system import VectorField

logger = logging.getLogger(__name__)

CHAIN_FLOW_CONFIG = FlowMapConfig(abs_tol=1e-8, rel_tol=1e-8)
_CHUNK = 20000


@dataclass(frozen=True)
class CellGrid:
    """Uniform tiling of the domain box; cells are numbered lexicographically (last axis fastest)."""

    domain: Box
    h: float

    def __post_init__(self) -> None:
        if self.h <= 0:
            raise ValueError("Cell size h must be positive.")
        counts = self.domain.widths / self.h
        if np.any(np.abs(counts - np.round(counts)) > 1e-6) or np.any(np.round(counts) < 1):
            raise ValueError(f"h = {self.h} does not tile the domain {self.domain.lo} .. {self.domain.hi}")

    @property
    def counts(self) -> tuple[int, ...]:
        return tuple(int(c) for c in np.round(self.domain.widths / self.h))

    @property
    def cell_width(self) -> np.ndarray:
        return self.domain.widths / np.asarray(self.counts)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.counts))

    @property
    def dim(self) -> int:
        return self.domain.dim

    def multi_index(self, cells) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(cells), self.counts), axis=-1)

    def flat_index(self, multi: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.moveaxis(np.asarray(multi), -1, 0)), self.counts)

    def cell_of(self, p: np.ndarray) -> np.ndarray:
        """Index of the cell holding p, -1 outside the domain."""
        p = np.asarray(p, dtype=float)
        idx = np.floor((p - self.domain.lo_array) / self.cell_width).astype(int)
        idx = np.minimum(idx, np.asarray(self.counts) - 1)  # upper faces belong to the last cell
        inside = self.domain.contains(p)
        safe = np.where(inside[..., None], idx, 0)
        return np.where(inside, self.flat_index(safe), -1)

    def bounds(self, cells) -> tuple[np.ndarray, np.ndarray]:
        lo = self.domain.lo_array + self.multi_index(cells) * self.cell_width
        return lo, lo + self.cell_width

    def centers(self, cells=None) -> np.ndarray:
        cells = np.arange(self.n_cells) if cells is None else np.asarray(cells)
        lo, hi = self.bounds(cells)
        return 0.5 * (lo + hi)

    def sample_layout(self, samples_per_cell: int = 1) -> tuple[np.ndarray, list[np.ndarray]]:
        """Lattice nodes at spacing width/samples_per_cell plus cell centers.

        Returns the points and, for each point, the cells whose closure holds it
        (one int array per point slot, -1 padded, shape (n_points, 2**dim)).
        """
        m = int(samples_per_cell)
        if m < 1:
            raise ValueError("samples_per_cell must be at least 1.")
        counts = np.asarray(self.counts)
        axes_pts, axes_own = [], []
        for ax in range(self.dim):
            a = np.arange(counts[ax] * m + 1)
            axes_pts.append(self.domain.lo[ax] + a * self.cell_width[ax] / m)
            first = np.where(a // m < counts[ax], a // m, -1)
            second = np.where((a % m == 0) & (a > 0), a // m - 1, -1)
            axes_own.append(np.stack([first, second], axis=-1))
        mesh = np.stack(np.meshgrid(*axes_pts, indexing="ij"), axis=-1).reshape(-1, self.dim)
        own_idx = np.stack(np.meshgrid(*[np.arange(len(p)) for p in axes_pts], indexing="ij"), axis=-1).reshape(-1, self.dim)
        owners = []
        for choice in itertools.product((0, 1), repeat=self.dim):
            parts = [axes_own[ax][own_idx[:, ax], c] for ax, c in enumerate(choice)]
            multi = np.stack(parts, axis=-1)
            ok = np.all(multi >= 0, axis=-1)
            flat = np.full(len(mesh), -1)
            flat[ok] = self.flat_index(multi[ok])
            owners.append(flat)
        node_owner = np.stack(owners, axis=-1)
        centers = self.centers()
        center_owner = np.full((self.n_cells, node_owner.shape[1]), -1)
        center_owner[:, 0] = np.arange(self.n_cells)
        return np.vstack([mesh, centers]), np.vstack([node_owner, center_owner])


@dataclass
class TransitionGraph:
    """Directed cell graph at flight time T and inflation eps, held as a sparse adjacency matrix."""

    grid: CellGrid
    T: float
    eps: float
    adjacency: sparse.csr_matrix
    exits: frozenset[int] = frozenset()

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.nnz)

    def edges(self) -> set[tuple[int, int]]:
        coo = self.adjacency.tocoo()
        return set(zip(coo.row.tolist(), coo.col.tolist()))

    def successors(self, cell: int) -> np.ndarray:
        row = self.adjacency.getrow(cell)
        return row.indices

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(self.grid.n_cells))
        g.add_edges_from(self.edges())
        return g


@dataclass
class RecurrentSet:
    """Union of recurrent cells, split into chain-transitive components."""

    grid: CellGrid
    cells: frozenset[int] = frozenset()
    components: list[frozenset[int]] = field(default_factory=list)
    morse_graph: nx.DiGraph = field(default_factory=nx.DiGraph)

    def __post_init__(self) -> None:
        ordered = sorted(self.cells)
        self._cells = np.asarray(ordered, dtype=int)
        if len(ordered):
            self._lo, self._hi = self.grid.bounds(self._cells)
        else:
            self._lo = self._hi = np.empty((0, self.grid.dim))
        self._component_of = {c: i for i, comp in enumerate(self.components) for c in comp}

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def is_empty(self) -> bool:
        return len(self.cells) == 0

    def component_of(self, cell: int) -> int:
        return self._component_of.get(cell, -1)

    def distance(self, p: np.ndarray) -> np.ndarray:
        """Euclidean distance to the union of recurrent cells; +inf when there are none."""
        p = np.asarray(p, dtype=float)
        flat = p.reshape(-1, self.dim)
        if self.is_empty:
            out = np.full(len(flat), np.inf)
        else:
            out = np.empty(len(flat))
            for start in range(0, len(flat), 256):
                chunk = flat[start:start + 256, None, :]
                gap = np.maximum(np.maximum(self._lo - chunk, chunk - self._hi), 0.0)
                out[start:start + 256] = np.linalg.norm(gap, axis=-1).min(axis=-1)
        return float(out[0]) if p.ndim == 1 else out.reshape(p.shape[:-1])

    def contains(self, p: np.ndarray) -> np.ndarray:
        return self.distance(p) == 0.0

    def sample(self, n: int, seed: int) -> np.ndarray:
        return self.grid.centers(self._cells)

    def diameter(self) -> float:
        if self.is_empty:
            return 0.0
        lo = self._lo.min(axis=0)
        hi = self._hi.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def summary(self) -> dict:
        return {
            "cells": len(self.cells),
            "components": len(self.components),
            "sizes": [len(c) for c in self.components],
            "morse_edges": sorted(self.morse_graph.edges()),
        }


def _frozen_field(X: VectorField, domain: Box, collar: float):
    """X damped to rest within `collar` outside the domain so escaping samples stop there."""
    step = SmoothStep(0.0, collar)
    n = domain.dim

    def rhs(t, y):
        pts = y.reshape(-1, n)
        damp = 1.0 - step(domain.distance(pts))
        return (X(pts) * np.atleast_1d(damp)[:, None]).ravel()

    return rhs


def _images(X: VectorField, points: np.ndarray, T: float, cfg: FlowMapConfig, collar: float) -> np.ndarray:
    sol = solve_ivp(
        _frozen_field(X, X.domain, collar), (0.0, T), points.ravel(), method=cfg.method, rtol=cfg.rel_tol, atol=cfg.abs_tol
    )
    if sol.status < 0:
        raise RuntimeError(f"integration of cell samples failed: {sol.message}")
    return sol.y[:, -1].reshape(points.shape)


def _hit_cells(grid: CellGrid, images: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """(image row, cell) pairs where the closed eps-ball about the image meets the cell."""
    w = grid.cell_width
    counts = np.asarray(grid.counts)
    reach = np.ceil(eps / w).astype(int)
    offsets = np.stack(
        np.meshgrid(*[np.arange(-r, r + 1) for r in reach], indexing="ij"), axis=-1
    ).reshape(-1, grid.dim)
    base = np.floor((images - grid.domain.lo_array) / w).astype(int)
    cand = base[:, None, :] + offsets[None, :, :]
    valid = np.all((cand >= 0) & (cand < counts), axis=-1)
    lo = grid.domain.lo_array + cand * w
    gap = np.maximum(np.maximum(lo - images[:, None, :], images[:, None, :] - (lo + w)), 0.0)
    valid &= np.linalg.norm(gap, axis=-1) <= eps
    rows, cols = np.nonzero(valid)
    return rows, grid.flat_index(cand[rows, cols])


def build_transition_graph(
    X: VectorField,
    grid: CellGrid,
    T: float,
    eps: float,
    samples_per_cell: int = 1,
    cfg: FlowMapConfig = CHAIN_FLOW_CONFIG,
    threads: int = 1,
) -> TransitionGraph:
    """Edge i -> j iff the eps-inflated time-T image of a sample of cell i meets cell j.

    Samples whose orbit leaves the domain within time T give no edges; their
    cells are listed in `exits`.
    """
    if T <= 0 or eps <= 0:
        raise ValueError("Flight time T and inflation eps must be positive.")
    points, owners = grid.sample_layout(samples_per_cell)
    chunks = [slice(s, min(s + _CHUNK, len(points))) for s in range(0, len(points), _CHUNK)]
    collar = float(grid.cell_width.min())

    def edges_of(chunk: slice):
        imgs = _images(X, points[chunk], T, cfg, collar)
        own = owners[chunk]
        outside = grid.domain.distance(imgs) > 0
        exited = own[outside].ravel()
        rows, cols = _hit_cells(grid, imgs, eps)
        # an orbit that left the domain is gone; its frozen image makes no edge
        inside = ~outside[rows]
        rows, cols = rows[inside], cols[inside]
        src = own[rows]
        dst = np.repeat(cols[:, None], src.shape[1], axis=1)
        keep = src >= 0
        keys = np.unique(src[keep].astype(np.int64) * grid.n_cells + dst[keep])
        return keys, exited[exited >= 0]

    results = map_points(edges_of, chunks, threads)
    keys = np.unique(np.concatenate([k for k, _ in results])) if results else np.empty(0, dtype=np.int64)
    exits = frozenset(int(c) for _, e in results for c in e)
    src, dst = np.divmod(keys, grid.n_cells)
    adjacency = sparse.csr_matrix(
        (np.ones(len(keys), dtype=np.int8), (src, dst)), shape=(grid.n_cells, grid.n_cells)
    )
    logger.info(
        "transition graph: %d cells, %d edges, %d exit cells (T=%g, eps=%g)", grid.n_cells, len(keys), len(exits), T, eps
    )
    return TransitionGraph(grid, T, eps, adjacency, exits)


def _morse_graph(graph: TransitionGraph, components: list[frozenset[int]]) -> nx.DiGraph:
    """Reachability order among components, transitively reduced."""
    order = nx.DiGraph()
    order.add_nodes_from(range(len(components)))
    owner = np.full(graph.grid.n_cells, -1)
    for i, comp in enumerate(components):
        owner[list(comp)] = i
    for i, comp in enumerate(components):
        reached = breadth_first_order(graph.adjacency, next(iter(comp)), directed=True, return_predecessors=False)
        for j in set(owner[reached].tolist()) - {-1, i}:
            order.add_edge(i, j)
    return nx.transitive_reduction(order) if order.number_of_edges() else order


def recurrent_cells(graph: TransitionGraph) -> RecurrentSet:
    """Cells on a directed cycle: SCCs with more than one cell, or a self-loop."""
    n_comp, labels = connected_components(graph.adjacency, directed=True, connection="strong")
    sizes = np.bincount(labels, minlength=n_comp)
    loops = graph.adjacency.diagonal() > 0
    nontrivial = sizes > 1
    nontrivial[labels[loops]] = True
    members: dict[int, list[int]] = {}
    for cell in np.nonzero(nontrivial[labels])[0]:
        members.setdefault(int(labels[cell]), []).append(int(cell))
    components = sorted((frozenset(m) for m in members.values()), key=min)
    cells = frozenset().union(*components) if components else frozenset()
    morse = _morse_graph(graph, components)
    logger.info("recurrent set: %d cells in %d components", len(cells), len(components))
    return RecurrentSet(graph.grid, cells, components, morse)


def dist_to_recurrent(R: RecurrentSet, p: np.ndarray) -> float:
    return float(R.distance(np.asarray(p, dtype=float)))


def export_cells(R: RecurrentSet, path: Path) -> Path:
    """One line per recurrent cell: multi-index, lower corner, upper corner, component id."""
    cells = np.array(sorted(R.cells), dtype=np.int64)
    multi = R.grid.multi_index(cells).reshape(-1, R.dim)
    lo, hi = R.grid.bounds(cells)
    frame = pd.DataFrame(
        {
            **{f"i{a}": multi[:, a] for a in range(R.dim)},
            **{f"lo{a}": lo.reshape(-1, R.dim)[:, a] for a in range(R.dim)},
            **{f"hi{a}": hi.reshape(-1, R.dim)[:, a] for a in range(R.dim)},
            "component": [R.component_of(c) for c in cells],
        }
    )
    path = Path(path)
    frame.to_csv(path, sep=" ", header=False, index=False, float_format="%.17g")
    return path


def chain_recurrent_set(
    X: VectorField,
    h: float,
    T: float,
    eps: float | None = None,
    samples_per_cell: int = 1,
    threads: int = 1,
) -> RecurrentSet:
    grid = CellGrid(X.domain, h)
    graph = build_transition_graph(X, grid, T, 2.0 * h if eps is None else eps, samples_per_cell, threads=threads)
    return recurrent_cells(graph)
