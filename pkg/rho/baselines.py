import heapq
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ppum.gridmap import GridSpec, ProbabilityGrid, cell_centers, cell_index

from .planner import Obstacle

_NEIGHBOURS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]


class NoPathError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class GridGraph:
    """8-connected grid over a probability map; blocked cells come from inflated obstacles."""

    spec: GridSpec
    occupancy: np.ndarray
    congestion: ProbabilityGrid | None = None

    def __post_init__(self):
        occupancy = np.array(self.occupancy, dtype=bool)
        if occupancy.shape != (self.spec.resolution,) * 2:
            raise ValueError(f"occupancy shape {occupancy.shape} does not match {self.spec}")
        if self.congestion is not None and self.congestion.spec != self.spec:
            raise ValueError(f"grid spec mismatch: {self.congestion.spec} vs {self.spec}")
        occupancy.flags.writeable = False
        object.__setattr__(self, "occupancy", occupancy)

    def congestion_at(self, cell: tuple[int, int]) -> float:
        return 0.0 if self.congestion is None else float(self.congestion.values[cell])


class GridPath(NamedTuple):
    cells: list[tuple[int, int]]
    points: np.ndarray
    cost: float


def build_grid_graph(spec: GridSpec, obstacles, congestion: ProbabilityGrid | None = None, d_safe: float = 0.0) -> GridGraph:
    centers = cell_centers(spec)
    occupancy = np.zeros((spec.resolution,) * 2, dtype=bool)
    for o in obstacles:
        occupancy |= np.linalg.norm(centers - o.center, axis=-1) < o.radius + d_safe
    return GridGraph(spec, occupancy, congestion)


def _search(graph: GridGraph, start, goal, lam: float) -> GridPath:
    spec = graph.spec
    n = spec.resolution
    h = spec.cell_size
    s, g = cell_index(spec, start), cell_index(spec, goal)
    for name, cell in (("start", s), ("goal", g)):
        if graph.occupancy[cell]:
            raise ValueError(f"{name} cell {cell} is blocked")

    def heuristic(cell):
        return h * math.hypot(cell[0] - g[0], cell[1] - g[1])

    best = {s: 0.0}
    parent = {s: None}
    closed = set()
    # ties on f fall back to the lower (row, col)
    frontier = [(heuristic(s), s[0], s[1], 0.0)]
    while frontier:
        _, row, col, cost = heapq.heappop(frontier)
        cell = (row, col)
        if cell in closed:
            continue
        closed.add(cell)
        if cell == g:
            break
        for dr, dc in _NEIGHBOURS:
            nxt = (row + dr, col + dc)
            if not (0 <= nxt[0] < n and 0 <= nxt[1] < n) or graph.occupancy[nxt] or nxt in closed:
                continue
            step = h * (math.sqrt(2.0) if dr and dc else 1.0)
            new_cost = cost + step + lam * graph.congestion_at(nxt)
            if new_cost < best.get(nxt, math.inf):
                best[nxt] = new_cost
                parent[nxt] = cell
                heapq.heappush(frontier, (new_cost + heuristic(nxt), nxt[0], nxt[1], new_cost))
    else:
        raise NoPathError(f"no path from {s} to {g}")

    cells = [g]
    while parent[cells[-1]] is not None:
        cells.append(parent[cells[-1]])
    cells.reverse()
    centers = cell_centers(spec)
    points = np.concatenate(
        [np.asarray(start, dtype=np.float64)[None], centers[tuple(np.array(cells).T)], np.asarray(goal, dtype=np.float64)[None]]
    )
    return GridPath(cells, points, best[g])


def astar(graph: GridGraph, start, goal) -> GridPath:
    return _search(graph, start, goal, 0.0)


def congestion_astar(graph: GridGraph, start, goal, lam: float) -> GridPath:
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return _search(graph, start, goal, lam)


def path_cost(graph: GridGraph, path: GridPath) -> float:
    """Edge-length cost of the cell chain."""
    h = graph.spec.cell_size
    return float(sum(h * math.hypot(a[0] - b[0], a[1] - b[1]) for a, b in zip(path.cells[:-1], path.cells[1:])))


def summed_congestion(graph: GridGraph, path: GridPath) -> float:
    return float(sum(graph.congestion_at(c) for c in path.cells[1:]))


# multiples of (cell size x cells per map) so one uniform-density cell costs factor * cell size
congestion_presets = {
    "CG1": 0.5,
    "CG2": 4.0,
}


def congestion_weight(preset: str, spec: GridSpec) -> float:
    if preset not in congestion_presets:
        raise ValueError(f"unknown congestion preset {preset!r}, available: {sorted(congestion_presets)}")
    return congestion_presets[preset] * spec.cell_size * spec.resolution**2


__all__ = [
    "GridGraph",
    "GridPath",
    "NoPathError",
    "Obstacle",
    "astar",
    "build_grid_graph",
    "congestion_astar",
    "congestion_presets",
    "congestion_weight",
    "path_cost",
    "summed_congestion",
]
