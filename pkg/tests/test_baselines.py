import heapq
import math

import numpy as np
import pytest

from ppum.gridmap import GridSpec, ProbabilityGrid, uniform_grid
from rho.baselines import (
    GridGraph,
    NoPathError,
    astar,
    build_grid_graph,
    congestion_astar,
    congestion_weight,
    path_cost,
    summed_congestion,
)
from rho.planner import Obstacle

SPEC = GridSpec(10.0, 10)


def _dijkstra(occupancy, s, g, h=1.0):
    n = occupancy.shape[0]
    dist = {s: 0.0}
    heap = [(0.0, s)]
    while heap:
        d, cell = heapq.heappop(heap)
        if cell == g:
            return d
        if d > dist[cell]:
            continue
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                nxt = (cell[0] + dr, cell[1] + dc)
                if (dr, dc) == (0, 0) or not (0 <= nxt[0] < n and 0 <= nxt[1] < n) or occupancy[nxt]:
                    continue
                nd = d + h * math.hypot(dr, dc)
                if nd < dist.get(nxt, math.inf):
                    dist[nxt] = nd
                    heapq.heappush(heap, (nd, nxt))
    return math.inf


def test_empty_map_octile_distance():
    graph = build_grid_graph(SPEC, [])
    path = astar(graph, (0.5, 0.5), (9.5, 3.5))
    assert path.cells[0] == (0, 0) and path.cells[-1] == (3, 9)
    assert path.cost == pytest.approx(3 * math.sqrt(2) + 6)
    assert path_cost(graph, path) == pytest.approx(path.cost)
    np.testing.assert_allclose(path.points[0], (0.5, 0.5))
    np.testing.assert_allclose(path.points[-1], (9.5, 3.5))


def test_walled_off_goal():
    occupancy = np.zeros((10, 10), dtype=bool)
    occupancy[6:9, 6:9] = True
    occupancy[7, 7] = False
    with pytest.raises(NoPathError, match="no path"):
        astar(GridGraph(SPEC, occupancy), (0.5, 0.5), (7.5, 7.5))


def test_blocked_start():
    graph = build_grid_graph(SPEC, [Obstacle((0.5, 0.5), 0.4)])
    with pytest.raises(ValueError, match="blocked"):
        astar(graph, (0.5, 0.5), (9.5, 9.5))


def test_obstacle_matches_dijkstra():
    graph = build_grid_graph(SPEC, [Obstacle((5.0, 5.0), 1.5)], d_safe=0.3)
    assert graph.occupancy[5, 5] and not graph.occupancy[0, 0]
    path = astar(graph, (0.5, 5.5), (9.5, 4.5))
    assert path.cost == pytest.approx(_dijkstra(graph.occupancy, (5, 0), (4, 9)))
    assert not any(graph.occupancy[c] for c in path.cells)


def test_zero_weight_reduces_to_astar():
    graph = build_grid_graph(SPEC, [Obstacle((5.0, 5.0), 1.0)], uniform_grid(SPEC))
    a = astar(graph, (0.5, 0.5), (9.5, 9.5))
    b = congestion_astar(graph, (0.5, 0.5), (9.5, 9.5), 0.0)
    assert a.cells == b.cells


def test_uniform_congestion_keeps_shortest_length():
    graph = build_grid_graph(SPEC, [], uniform_grid(SPEC))
    a = astar(graph, (0.5, 0.5), (9.5, 8.5))
    b = congestion_astar(graph, (0.5, 0.5), (9.5, 8.5), 50.0)
    assert path_cost(graph, b) == pytest.approx(path_cost(graph, a))
    assert len(b.cells) == len(a.cells)


def test_hot_band_is_circumvented():
    values = np.zeros((10, 10))
    values[0:7, 4:6] = 1.0
    graph = build_grid_graph(SPEC, [], ProbabilityGrid(SPEC, values / values.sum()))
    a = astar(graph, (0.5, 0.5), (9.5, 0.5))
    b = congestion_astar(graph, (0.5, 0.5), (9.5, 0.5), congestion_weight("CG2", SPEC))
    assert summed_congestion(graph, b) < summed_congestion(graph, a)
    assert summed_congestion(graph, b) == 0.0


def test_congestion_weight():
    assert congestion_weight("CG1", SPEC) == pytest.approx(50.0)
    assert congestion_weight("CG2", SPEC) > congestion_weight("CG1", SPEC)
    with pytest.raises(ValueError):
        congestion_weight("CG3", SPEC)
    with pytest.raises(ValueError):
        congestion_astar(build_grid_graph(SPEC, []), (0.5, 0.5), (1.5, 1.5), -1.0)


def test_random_maps_match_dijkstra():
    rng = np.random.default_rng(7)
    congestion = uniform_grid(SPEC)
    for _ in range(200):
        occupancy = rng.uniform(size=(10, 10)) < 0.25
        occupancy[0, 0] = occupancy[9, 9] = False
        graph = GridGraph(SPEC, occupancy, congestion)
        expected = _dijkstra(occupancy, (0, 0), (9, 9))
        if math.isinf(expected):
            with pytest.raises(NoPathError):
                astar(graph, (0.5, 0.5), (9.5, 9.5))
            continue
        path = astar(graph, (0.5, 0.5), (9.5, 9.5))
        assert path.cost == pytest.approx(expected)
        assert congestion_astar(graph, (0.5, 0.5), (9.5, 9.5), 0.0).cells == path.cells


@pytest.mark.parametrize("seed", range(5))
def test_congestion_falls_as_weight_grows(seed):
    rng = np.random.default_rng(seed)
    spec = GridSpec(10.0, 20)
    hot = rng.exponential(size=(20, 20)) ** 3
    occupancy = rng.uniform(size=(20, 20)) < 0.1
    occupancy[0, 0] = occupancy[19, 19] = False
    graph = GridGraph(spec, occupancy, ProbabilityGrid(spec, hot / hot.sum()))
    try:
        astar(graph, (0.25, 0.25), (9.75, 9.75))
    except NoPathError:
        pytest.skip("random occupancy cut the map")
    congestion, lengths = [], []
    for lam in (0.0, 1.0, 10.0, 100.0, 1000.0):
        path = congestion_astar(graph, (0.25, 0.25), (9.75, 9.75), lam)
        congestion.append(summed_congestion(graph, path))
        lengths.append(path_cost(graph, path))
    assert all(b <= a + 1e-9 for a, b in zip(congestion, congestion[1:]))
    assert all(b >= a - 1e-9 for a, b in zip(lengths, lengths[1:]))
