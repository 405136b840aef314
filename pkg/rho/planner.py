"""
Receding horizon global path planner over a crowd probability map.

Each iteration optimizes a short sub-path of n waypoints anchored at the current
position, commits only its second waypoint and re-plans from there until the sub-path
ends within the goal's inflation radius.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange, repeat

from ppum.gridmap import ProbabilityGrid, probability_at
from ppum.memory import MemoryLayer

from .geometry import as_points, sample_polyline

FEASIBILITY_TOL = 1e-6
_EPS = 1e-12


class InfeasibleSubproblemError(RuntimeError):
    pass


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"obstacle radius must be > 0, got {self.radius}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "radius", float(self.radius))


@dataclass
class OptimizerSettings:
    penalty_start: float = 10.0
    penalty_growth: float = 10.0
    penalty_rounds: int = 6
    max_iterations: int = 50
    tolerance: float = 1e-10
    # constraints are tightened by this much inside the optimizer
    margin: float = 1e-4


@dataclass
class PlannerParams:
    n: int = 5
    d_l: float = 4.0
    d_I: float | None = None
    d_r: float | None = None
    d_s: float = 0.5
    d_safe: float = 0.3
    alpha: float = 200.0
    restarts: int = 6
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    max_iterations: int | None = None

    def __post_init__(self):
        if self.d_I is None:
            self.d_I = self.d_l / self.n
        if self.d_r is None:
            self.d_r = self.d_l
        if self.n < 2:
            raise ValueError(f"n must be >= 2, got {self.n}")
        for name in ("d_I", "d_l", "d_r", "d_s", "d_safe", "alpha"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.d_l > self.n * self.d_I + 1e-12:
            raise ValueError(f"d_l={self.d_l} exceeds n * d_I={self.n * self.d_I}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")

    def step_limit(self, d_e2g: float) -> float:
        return self.d_I if d_e2g > self.d_r else self.d_I / self.n

    def length_limit(self, d_e2g: float) -> float:
        return self.d_l if d_e2g > self.d_r else d_e2g

    def iteration_cap(self, distance: float) -> int:
        """Iteration budget for a start-goal ``distance``, unless ``max_iterations`` overrides it.

        The far term allows each full step of length ``d_I`` to be repeated four times over the
        straight distance. The near term covers the last ``d_r`` metres, where steps shrink to
        ``d_I / n``, with twice the steps that stretch needs.
        """
        if self.max_iterations is not None:
            return self.max_iterations
        far = math.ceil(4.0 * distance / self.d_I)
        near = math.ceil(2.0 * self.n * min(distance, self.d_r) / self.d_I)
        return far + near


@dataclass(frozen=True, eq=False)
class SubPath:
    waypoints: np.ndarray
    cost: float
    d_e2g: float
    # goal distance that selected the spacing/length constraint branch
    d_ref: float = math.inf
    residual_max: float = 0.0
    restart: int = 0
    out_of_grid: bool = False

    def to_dict(self) -> dict:
        return {
            "waypoints": self.waypoints.tolist(),
            "cost": self.cost,
            "d_e2g": self.d_e2g,
            "residual_max": self.residual_max,
            "restart": self.restart,
            "out_of_grid": self.out_of_grid,
        }


@dataclass(frozen=True, eq=False)
class PathResult:
    valid_path: np.ndarray
    iterations: tuple[SubPath, ...] = ()
    reached: bool = False
    diagnostics: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "valid_path": np.asarray(self.valid_path).tolist(),
            "reached": self.reached,
            "iterations": [s.to_dict() for s in self.iterations],
            "diagnostics": list(self.diagnostics),
        }


class Residuals(NamedTuple):
    spacing: np.ndarray
    length: float
    clearance: np.ndarray
    chord: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.spacing, [self.length], self.clearance.reshape(-1), self.chord])

    def max(self) -> float:
        return float(self.vector().max())


def _grid_of(fm) -> ProbabilityGrid | None:
    if fm is None:
        return None
    return fm.grid if isinstance(fm, MemoryLayer) else fm


def _waypoints(wp) -> np.ndarray:
    return wp.waypoints if isinstance(wp, SubPath) else as_points(wp)


def _probabilities(fm, points: np.ndarray) -> tuple[np.ndarray, bool]:
    grid = _grid_of(fm)
    if grid is None:
        return np.zeros(len(points)), False
    probs = np.zeros(len(points))
    out_of_grid = False
    for i, p in enumerate(points):
        if grid.spec.contains(p):
            probs[i] = probability_at(grid, p)
        else:
            out_of_grid = True
    return probs, out_of_grid


def _cost(points: np.ndarray, goal: np.ndarray, fm, alpha: float) -> tuple[float, bool]:
    dist = np.linalg.norm(points - goal, axis=-1)
    probs, out_of_grid = _probabilities(fm, points)
    return float(dist.sum() + alpha * dist[-1] * probs.sum()), out_of_grid


def subpath_cost(wp, goal, fm, params: PlannerParams) -> float:
    points = _waypoints(wp)
    cost, out_of_grid = _cost(points, np.asarray(goal, dtype=np.float64), fm, params.alpha)
    if out_of_grid:
        logging.debug("sub-path leaves the grid, outside waypoints cost no probability")
    return cost


def obstacle_chord_limit(wp_i, obstacle: Obstacle, theta: float, d_safe: float) -> float | None:
    """Distance along a ray from wp_i, at angle theta to the obstacle direction, before it enters the inflated disc.

    None means the ray never enters the disc.
    """
    a = float(np.linalg.norm(np.asarray(wp_i, dtype=np.float64) - obstacle.center))
    d_j = obstacle.radius + d_safe
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    if cos_t <= 0.0:
        return None
    if a < d_j:
        return 0.0
    if (a * sin_t) ** 2 > d_j**2:
        return None
    return a * cos_t - math.sqrt(d_j**2 - (a * sin_t) ** 2)


def constraint_residuals(wp, goal, obstacles, params: PlannerParams, d_e2g: float | None = None) -> Residuals:
    """Independent post-hoc check; every entry is <= 0 when the sub-path is feasible.

    The spacing/length branch follows `d_e2g`, defaulting to the sub-path's own
    reference distance or, for bare waypoint arrays, the anchor's distance to the goal.
    """
    points = _waypoints(wp)
    goal = np.asarray(goal, dtype=np.float64)
    if d_e2g is None:
        d_e2g = wp.d_ref if isinstance(wp, SubPath) and math.isfinite(wp.d_ref) else float(np.linalg.norm(points[0] - goal))

    seg = np.diff(points, axis=0)
    lengths = np.linalg.norm(seg, axis=-1)
    spacing = lengths - params.step_limit(d_e2g)
    length = float(lengths.sum() - params.length_limit(d_e2g))

    obstacles = list(obstacles)
    clearance = np.zeros((len(points), len(obstacles)))
    chord = np.full(len(seg), -np.inf)
    for j, o in enumerate(obstacles):
        clearance[:, j] = o.radius + params.d_safe - np.linalg.norm(points - o.center, axis=-1)
    for i, (p, s, length_i) in enumerate(zip(points[:-1], seg, lengths)):
        if length_i < _EPS:
            continue
        limits = []
        for o in obstacles:
            to_obs = np.asarray(o.center) - p
            a = np.linalg.norm(to_obs)
            cos_t = 1.0 if a < _EPS else float(np.clip(to_obs @ s / (a * length_i), -1.0, 1.0))
            limit = obstacle_chord_limit(p, o, math.acos(cos_t), params.d_safe)
            if limit is not None:
                limits.append(limit)
        if limits:
            chord[i] = length_i - min(limits)
    return Residuals(spacing, length, clearance, chord)


def local_obstacles(anchor, obstacles, params: PlannerParams) -> list[Obstacle]:
    anchor = np.asarray(anchor, dtype=np.float64)
    return [
        o for o in obstacles
        if np.linalg.norm(anchor - o.center) <= params.d_l + o.radius + params.d_safe
    ]


class _Subproblem:
    """Batched penalized objective over the free waypoints of every restart."""

    def __init__(self, anchor, goal, fm, obstacles, params: PlannerParams, step_limit, length_limit):
        margin = params.optimizer.margin
        self.anchor = torch.as_tensor(anchor, dtype=torch.float64)
        self.goal = torch.as_tensor(goal, dtype=torch.float64)
        self.alpha = params.alpha
        self.step_limit = step_limit - margin
        self.length_limit = length_limit - margin

        grid = _grid_of(fm)
        self.grid = None
        if grid is not None:
            spec = grid.spec
            self.grid = rearrange(torch.as_tensor(grid.values, dtype=torch.float64), "h w -> 1 1 h w")
            self.first_center = torch.tensor(spec.origin, dtype=torch.float64) + 0.5 * spec.cell_size
            self.center_span = (spec.resolution - 1) * spec.cell_size

        self.n_obstacles = len(obstacles)
        if obstacles:
            centers = np.array([o.center for o in obstacles])
            inflated = np.array([o.radius + params.d_safe for o in obstacles])
            self.centers = torch.as_tensor(centers, dtype=torch.float64)
            self.clear = torch.as_tensor(inflated + margin, dtype=torch.float64)
            anchor_dist = np.linalg.norm(centers - np.asarray(anchor), axis=-1)
            seg_thr = np.tile(inflated + margin, (params.n - 1, 1))
            # the first segment may not drift closer to an obstacle than its fixed anchor already is
            seg_thr[0] = np.minimum(seg_thr[0], anchor_dist)
            self.seg_clear = torch.as_tensor(seg_thr, dtype=torch.float64)

    def probabilities(self, w: torch.Tensor) -> torch.Tensor:
        if self.grid is None:
            return torch.zeros(w.shape[:-1], dtype=w.dtype)
        r = w.shape[0]
        coords = (w - self.first_center) / self.center_span * 2.0 - 1.0
        coords = rearrange(coords, "r n c -> 1 1 (r n) c")
        sampled = F.grid_sample(self.grid, coords, mode="bilinear", padding_mode="zeros", align_corners=True)
        return rearrange(sampled, "1 1 1 (r n) -> r n", r=r)

    def terms(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        w = torch.cat([repeat(self.anchor, "c -> r 1 c", r=x.shape[0]), x], dim=1)
        dist = torch.sqrt(((w - self.goal) ** 2).sum(-1) + _EPS)
        cost = dist.sum(-1) + self.alpha * dist[:, -1] * self.probabilities(w).sum(-1)

        seg = w[:, 1:] - w[:, :-1]
        lengths = torch.sqrt((seg**2).sum(-1) + _EPS)
        penalty = F.relu(lengths - self.step_limit).pow(2).sum(-1)
        penalty = penalty + F.relu(lengths.sum(-1) - self.length_limit).pow(2)
        if self.n_obstacles:
            diff = rearrange(w[:, 1:], "r n c -> r n 1 c") - self.centers
            point_dist = torch.sqrt((diff**2).sum(-1) + _EPS)
            penalty = penalty + F.relu(self.clear - point_dist).pow(2).sum((-1, -2))

            start = rearrange(w[:, :-1], "r n c -> r n 1 c")
            direction = rearrange(seg, "r n c -> r n 1 c")
            t = ((self.centers - start) * direction).sum(-1) / (direction**2).sum(-1).clamp_min(_EPS)
            closest = start + t.clamp(0.0, 1.0).unsqueeze(-1) * direction
            seg_dist = torch.sqrt(((self.centers - closest) ** 2).sum(-1) + _EPS)
            penalty = penalty + F.relu(self.seg_clear - seg_dist).pow(2).sum((-1, -2))
        return cost, penalty


def _fit_lengths(points: np.ndarray, step_limit: float, length_limit: float) -> np.ndarray:
    """Shrink overlong segments in place along their direction, carrying later waypoints along."""
    points = points.copy()
    seg = np.diff(points, axis=0)
    lengths = np.linalg.norm(seg, axis=-1)
    shrink = 1.0 - 1e-9
    scale = np.minimum(1.0, shrink * step_limit / np.maximum(lengths, _EPS))
    seg = seg * scale[:, None]
    total = np.linalg.norm(seg, axis=-1).sum()
    if total > shrink * length_limit:
        seg = seg * (shrink * length_limit / total)
    points[1:] = points[0] + np.cumsum(seg, axis=0)
    return points


def _seed_waypoints(anchor, goal, params: PlannerParams, step_limit, length_limit, rng, warm_start) -> np.ndarray:
    n = params.n
    step = 0.9 * min(step_limit, length_limit / (n - 1))
    heading = goal - anchor
    base = math.atan2(heading[1], heading[0]) if np.linalg.norm(heading) > _EPS else 0.0
    seeds = []
    ks = np.arange(n, dtype=np.float64)[:, None]
    seeds.append(anchor + ks * step * np.array([math.cos(base), math.sin(base)]))
    if warm_start is not None and params.restarts > 1:
        prev = as_points(warm_start)
        shifted = np.concatenate([anchor[None], prev[2:], prev[-1:] + (prev[-1] - prev[-2])])
        seeds.append(_fit_lengths(shifted, step_limit, length_limit))
    while len(seeds) < params.restarts:
        mean_heading = base + rng.normal(0.0, 0.8)
        headings = mean_heading + rng.normal(0.0, 0.4, size=n - 1)
        steps = rng.uniform(0.3, 0.9, size=n - 1) * step
        moves = np.stack([np.cos(headings), np.sin(headings)], axis=-1) * steps[:, None]
        seeds.append(np.concatenate([anchor[None], anchor + np.cumsum(moves, axis=0)]))
    return np.stack(seeds[: params.restarts])


def solve_subproblem(
    anchor,
    goal,
    fm,
    obstacles,
    params: PlannerParams,
    rng_seed: int,
    d_e2g: float | None = None,
    warm_start=None,
) -> SubPath:
    """Multi-start penalty-method solve of one receding-horizon sub-problem.

    `d_e2g` is the goal distance of the previous sub-path (defaults to the anchor's) and
    selects the spacing and length limits; `warm_start` seeds one restart from the
    previous sub-path shifted by one waypoint.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    d_ref = float(np.linalg.norm(anchor - goal)) if d_e2g is None else float(d_e2g)
    step_limit, length_limit = params.step_limit(d_ref), params.length_limit(d_ref)
    obstacles = local_obstacles(anchor, obstacles, params)
    settings = params.optimizer

    rng = np.random.default_rng(rng_seed)
    seeds = _seed_waypoints(anchor, goal, params, step_limit, length_limit, rng, warm_start)
    problem = _Subproblem(anchor, goal, fm, obstacles, params, step_limit, length_limit)
    x = torch.tensor(seeds[:, 1:], dtype=torch.float64, requires_grad=True)

    best: list[tuple[float, np.ndarray, Residuals, bool] | None] = [None] * len(seeds)
    mu = settings.penalty_start
    for _ in range(settings.penalty_rounds):
        optimizer = torch.optim.LBFGS(
            [x],
            lr=1.0,
            max_iter=settings.max_iterations,
            tolerance_grad=1e-10,
            tolerance_change=settings.tolerance,
            history_size=20,
            line_search_fn="strong_wolfe",
        )

        def closure():
            optimizer.zero_grad()
            cost, penalty = problem.terms(x)
            loss = (cost + mu * penalty).sum()
            loss.backward()
            return loss

        optimizer.step(closure)
        with torch.no_grad():
            broken = ~torch.isfinite(x).all(dim=-1).all(dim=-1)
            if broken.any():
                x[broken] = torch.as_tensor(seeds[broken.numpy(), 1:])

        candidates = x.detach().numpy()
        for r, free in enumerate(candidates):
            points = _fit_lengths(np.concatenate([anchor[None], free]), step_limit, length_limit)
            residuals = constraint_residuals(points, goal, obstacles, params, d_e2g=d_ref)
            if residuals.max() > 0.0:
                continue
            cost, out_of_grid = _cost(points, goal, fm, params.alpha)
            if best[r] is None or cost < best[r][0]:
                best[r] = (cost, points, residuals, out_of_grid)
        if all(b is not None for b in best):
            break
        mu *= settings.penalty_growth

    feasible = [(b[0], r) for r, b in enumerate(best) if b is not None]
    if not feasible:
        raise InfeasibleSubproblemError(
            f"sub-problem infeasible: none of {len(seeds)} restarts met the constraints at anchor {anchor.tolist()}"
        )
    cost, r = min(feasible)
    _, points, residuals, out_of_grid = best[r]
    return SubPath(
        waypoints=points,
        cost=cost,
        d_e2g=float(np.linalg.norm(points[-1] - goal)),
        d_ref=d_ref,
        residual_max=residuals.max(),
        restart=r,
        out_of_grid=out_of_grid,
    )


def check_path(path, obstacles, d_safe: float, step: float = 0.01) -> float:
    """Smallest clearance to any inflated disc over dense samples of the path; negative means a collision."""
    obstacles = list(obstacles)
    if not obstacles:
        return math.inf
    samples = sample_polyline(path, step)
    centers = np.array([o.center for o in obstacles])
    inflated = np.array([o.radius + d_safe for o in obstacles])
    dist = np.linalg.norm(samples[:, None, :] - centers[None], axis=-1)
    return float((dist - inflated).min())


def straight_path(start, goal, step: float) -> np.ndarray:
    return sample_polyline([start, goal], step)


def wall_disc_cover(wall, radius: float) -> list[Obstacle]:
    """Discs of `radius` spaced at most `radius` apart along a wall segment."""
    a, b = (np.asarray(p, dtype=np.float64) for p in wall)
    length = float(np.linalg.norm(b - a))
    k = max(1, math.ceil(length / radius))
    return [Obstacle(tuple(a + (b - a) * i / k), radius) for i in range(k + 1)]


def _solve_with_retry(anchor, goal, fm, obstacles, params, seed, d_ref, warm) -> SubPath:
    try:
        return solve_subproblem(anchor, goal, fm, obstacles, params, seed, d_e2g=d_ref, warm_start=warm)
    except InfeasibleSubproblemError:
        logging.info(f"retrying sub-problem at {np.round(anchor, 3).tolist()} with {2 * params.restarts} restarts")
        wider = replace(params, restarts=2 * params.restarts)
        return solve_subproblem(anchor, goal, fm, obstacles, wider, seed + 1, d_e2g=d_ref, warm_start=warm)


def plan(start, goal, fm, obstacles, params: PlannerParams | None = None, rng_seed: int = 0) -> PathResult:
    params = params or PlannerParams()
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    obstacles = list(obstacles)
    for name, p in (("start", start), ("goal", goal)):
        for o in obstacles:
            if np.linalg.norm(p - o.center) < o.radius + params.d_safe:
                raise ValueError(f"{name} {p.tolist()} lies inside inflated obstacle at {o.center}")

    distance = float(np.linalg.norm(goal - start))
    if distance <= params.d_s:
        return PathResult(np.stack([start, goal]), (), True, ())

    rng = np.random.default_rng(rng_seed)
    cap = params.iteration_cap(distance)
    valid = [start]
    iterations: list[SubPath] = []
    diagnostics: list[str] = []
    anchor, d_ref, warm = start, distance, None
    reached = False
    for c in range(cap):
        seed = int(rng.integers(0, 2**31 - 1))
        try:
            sub = _solve_with_retry(anchor, goal, fm, obstacles, params, seed, d_ref, warm)
        except InfeasibleSubproblemError as e:
            diagnostics.append(f"iteration {c}: {e}")
            logging.warning(f"planning stopped at iteration {c}: {e}")
            break
        iterations.append(sub)
        if sub.out_of_grid:
            diagnostics.append(f"iteration {c}: waypoints outside the grid")
        if sub.d_e2g <= params.d_s:
            valid.extend(sub.waypoints[1:])
            reached = True
            break
        anchor, d_ref, warm = sub.waypoints[1], sub.d_e2g, sub.waypoints
        valid.append(anchor)
    else:
        diagnostics.append(f"iteration cap {cap} reached {d_ref:.3f} m from the goal")
        logging.warning(diagnostics[-1])

    if reached and np.linalg.norm(valid[-1] - goal) > 0.0:
        if check_path([valid[-1], goal], obstacles, params.d_safe) >= 0.0:
            valid.append(goal)
        else:
            diagnostics.append("final connector to the goal is blocked, path ends at the last waypoint")
    return PathResult(np.stack(valid), tuple(iterations), reached, tuple(diagnostics))


def path_to_json(result: PathResult, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(result.to_dict(), f, indent=1)
    return path
