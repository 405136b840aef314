from .baselines import GridGraph, NoPathError, astar, build_grid_graph, congestion_astar
from .planner import (
    InfeasibleSubproblemError,
    Obstacle,
    PathResult,
    PlannerParams,
    SubPath,
    constraint_residuals,
    obstacle_chord_limit,
    plan,
    solve_subproblem,
    subpath_cost,
)
