import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ppum.gridmap import ProbabilityGrid, cell_centers, grid_rmse
from rho.geometry import as_points, polyline_distance, polyline_length


@dataclass(frozen=True)
class TravelTimeModel:
    """Exponential slowdown v = v_max * exp(-beta * rho); the default beta halves speed at 1 person/m^2."""

    half_width: float = 0.5
    v_max: float = 1.2
    beta: float = math.log(2.0)

    def __post_init__(self):
        if not self.half_width > 0:
            raise ValueError(f"half_width must be > 0, got {self.half_width}")
        if not self.v_max > 0:
            raise ValueError(f"v_max must be > 0, got {self.v_max}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")

    @classmethod
    def from_config(cls, config) -> "TravelTimeModel":
        return cls(config.half_width, config.v_max, config.beta)


def corridor_count(path, agents_or_grid, half_width: float) -> float:
    """Agents (or grid mass) within `half_width` of the path polyline."""
    path = as_points(path)
    if len(path) < 2:
        raise ValueError(f"path needs at least 2 points, got {len(path)}")
    if isinstance(agents_or_grid, ProbabilityGrid):
        centers = cell_centers(agents_or_grid.spec).reshape(-1, 2)
        inside = polyline_distance(centers, path) <= half_width
        return float(agents_or_grid.values.reshape(-1)[inside].sum())
    positions = as_points(agents_or_grid)
    if len(positions) == 0:
        return 0.0
    return float(np.count_nonzero(polyline_distance(positions, path) <= half_width))


def expected_travel_time(path, count: float, model: TravelTimeModel = TravelTimeModel()) -> float:
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    length = polyline_length(path)
    if length == 0.0:
        return 0.0
    density = count / (length * 2.0 * model.half_width)
    return length / (model.v_max * math.exp(-model.beta * density))


def travel_time_for(path, truth: ProbabilityGrid, n_agents: int, model: TravelTimeModel = TravelTimeModel()) -> float:
    count = corridor_count(path, truth, model.half_width) * n_agents
    return expected_travel_time(path, count, model)


def improvement_index(t_bench: float, t_rho: float) -> float:
    if not t_bench > 0:
        raise ValueError(f"benchmark travel time must be > 0, got {t_bench}")
    return (t_bench - t_rho) / t_bench


class RmseSeries(NamedTuple):
    times: list[float]
    values: list[float]
    average: float


def rmse_series(estimates, truths) -> RmseSeries:
    """Per-timestep grid RMSE of aligned (t, grid) sequences and its mean."""
    estimates, truths = list(estimates), list(truths)
    if len(estimates) != len(truths):
        raise ValueError(f"series lengths differ: {len(estimates)} vs {len(truths)}")
    times, values = [], []
    for (t_est, est), (t_true, truth) in zip(estimates, truths):
        if abs(t_est - t_true) > 1e-9:
            raise ValueError(f"misaligned series at t={t_est} vs t={t_true}")
        times.append(float(t_est))
        values.append(grid_rmse(est, truth))
    average = float(np.mean(values)) if values else math.nan
    return RmseSeries(times, values, average)
