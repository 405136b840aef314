"""
Case study harness: memory accuracy in a corridor (case 1), travel time on random
crowded maps (case 2) and adaptability to changing anomalies (case 3).
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from crowdsim.scenario import ScenarioConfig, load_scenario
from crowdsim.simulator import (
    WorldState,
    generate_random_map,
    ground_truth_grid,
    initial_world,
    observe,
    run,
    scenario_obstacles,
    schedule_activations,
    step,
)
from ppum.gridmap import GridSpec
from ppum.memory import (
    FusionConfig,
    LayerKind,
    MemoryLayer,
    PartiallyUpdatedMemory,
    PeriodicOlmModel,
    fit_periodic_olm,
    fuse_layers,
    olm_predict,
    working_memory_layer,
)
from ppum.tracking import SensorModel, TrackBank, build_working_memory
from rho.baselines import GridGraph, NoPathError, astar, build_grid_graph, congestion_astar, congestion_weight
from rho.planner import PlannerParams, plan
from rho.util import load_planner_params

from .evaluate import TravelTimeModel, improvement_index, rmse_series, travel_time_for
from .report import rounded, write_report
from .utils import derive_seeds, run_replications

METHODS = ("RHO", "A*", "CG1", "CG2")
MEMORIES = ("OLM", "PUM", "PPUM")
CASE_SCENARIOS = {
    1: ("case1_corridor", "case1_corridor_transient"),
    2: ("case2_random",),
    3: ("case3_corridor", "case3_plaza"),
}
DEFAULT_REPS = {1: 20, 2: 1, 3: 3}
# benchmark planner and the memory it plans on in the adaptability case
CASE3_BENCHMARKS = {"A*": None, "CG1": "OLM", "CG2": "PUM"}


@dataclass
class RunManifest:
    scenario: str | None = None
    methods: tuple[str, ...] = METHODS
    memories: tuple[str, ...] = MEMORIES
    reps: int | None = None
    seed: int = 0
    out: str = "output"

    def __post_init__(self):
        self.methods = tuple(self.methods)
        self.memories = tuple(self.memories)
        if not self.methods:
            raise ValueError("at least one planning method is required")
        unknown = set(self.methods) - set(METHODS) | set(self.memories) - set(MEMORIES)
        if unknown:
            raise ValueError(f"unknown methods or memories: {sorted(unknown)}")
        if self.reps is not None and self.reps < 1:
            raise ValueError(f"reps must be >= 1, got {self.reps}")

    def replications(self, case: int) -> int:
        return DEFAULT_REPS[case] if self.reps is None else self.reps


def grid_spec(config: ScenarioConfig) -> GridSpec:
    return GridSpec.from_cell_size(config.map_size, config.grid_cell)


def planner_params(config: ScenarioConfig) -> PlannerParams:
    return load_planner_params(config.planner, **dict(config.planner_overrides))


def sensor_model(config: ScenarioConfig, dt: float) -> SensorModel:
    if config.sensor is None:
        raise ValueError(f"scenario {config.name!r} has no sensor section")
    s = config.sensor
    return SensorModel.isotropic(s.sigma, s.accel_noise, s.fov_radius, dt)


def fit_olm(config: ScenarioConfig, dt: float | None = None) -> PeriodicOlmModel:
    """Fit the periodic prior from a run of the same scenario with every attractor removed."""
    if config.olm is None:
        raise ValueError(f"scenario {config.name!r} has no olm section")
    olm = config.olm
    dt = dt or config.evaluation.dt
    regular = config.model_copy(deep=True)
    regular.attractors = []
    snapshots = [
        (world.time, world.positions)
        for world in run(regular, olm.warmup + olm.duration, dt, seed=config.seeds.world + 100_003)
        if world.time >= olm.warmup - 1e-9
    ]
    logging.info(f"fitting OLM for {config.name} from {len(snapshots)} snapshots")
    return fit_periodic_olm(snapshots, olm.cycle_length, olm.bin_width, olm.bandwidth, olm.max_components)


class MemoryPipeline:
    """Sensor feed -> tracks -> WM, served together with the OLM, PUM and PPUM layers."""

    def __init__(self, config: ScenarioConfig, olm_model: PeriodicOlmModel, dt: float, seed: int):
        self.config = config
        self.spec = grid_spec(config)
        self.olm_model = olm_model
        self.sensor = sensor_model(config, dt)
        self.pose = np.asarray(config.sensor.pose, dtype=np.float64)
        self.bank = TrackBank(self.sensor)
        self.rng = np.random.default_rng([seed, config.seeds.sensor])
        self.fusion = FusionConfig(config.gamma)
        self.pum = PartiallyUpdatedMemory(config.evaluation.pum_horizon)
        self.pum_interval = config.evaluation.pum_update_interval
        self._last_pum = -math.inf
        self.tracks = []

    def _working_memory(self, t: float):
        model, sigma_bar = build_working_memory(self.tracks, self.spec)
        wm = working_memory_layer(model, self.spec, self.pose, self.sensor.fov_radius)
        return wm, olm_predict(self.olm_model, t, self.spec), sigma_bar

    def track(self, world: WorldState) -> None:
        self.tracks = self.bank.update(observe(world, self.pose, self.sensor, self.rng))
        if world.time - self._last_pum >= self.pum_interval - 1e-9:
            wm, olm, _ = self._working_memory(world.time)
            self.pum.update(wm, olm, world.time)
            self._last_pum = world.time

    def layers(self, t: float) -> dict[str, MemoryLayer]:
        wm, olm, sigma_bar = self._working_memory(t)
        return {
            "OLM": olm,
            "PUM": self.pum.predict(olm, t),
            "PPUM": fuse_layers(wm, olm, sigma_bar, self.fusion),
        }


def memory_at(config: ScenarioConfig, olm_model: PeriodicOlmModel, t: float, seed: int | None = None):
    """Simulate the scenario up to `t` while tracking; returns the final world and its memory layers."""
    seed = config.seeds.world if seed is None else seed
    dt = config.evaluation.dt
    pipeline = MemoryPipeline(config, olm_model, dt, seed)
    world = initial_world(config, seed)
    while world.time < t - 1e-9:
        world = step(world, config, dt)
        pipeline.track(world)
    return world, pipeline.layers(world.time)


def case1_run(config: ScenarioConfig, olm_model: PeriodicOlmModel, seed: int) -> dict:
    ev = config.evaluation
    spec = grid_spec(config)
    pipeline = MemoryPipeline(config, olm_model, ev.dt, seed)
    world = initial_world(config, seed)
    estimates = {m: [] for m in MEMORIES}
    truths = []
    end = ev.start + ev.duration
    while world.time < end - 1e-9:
        world = step(world, config, ev.dt)
        pipeline.track(world)
        if world.time < ev.start - 1e-9:
            continue
        truths.append((world.time, ground_truth_grid(world, spec, config.ground_truth_bandwidth)))
        layers = pipeline.layers(world.time)
        for m in MEMORIES:
            estimates[m].append((world.time, layers[m].grid))
    return {m: rmse_series(estimates[m], truths).average for m in MEMORIES}


def reproduce_case1(manifest: RunManifest) -> dict:
    names = (manifest.scenario,) if manifest.scenario else CASE_SCENARIOS[1]
    seeds = derive_seeds(manifest.seed, manifest.replications(1))
    rows, variants, fingerprints = [], {}, {}
    for name in names:
        config = load_scenario(name)
        fingerprints[config.name] = config.fingerprint()
        olm_model = fit_olm(config)
        results = run_replications(case1_run, [(config, olm_model, s) for s in seeds], desc=config.name)
        for rep, (seed, result) in enumerate(zip(seeds, results)):
            rows.append({"scenario": config.name, "rep": rep, "seed": seed, **{f"rmse_{m}": result[m] for m in MEMORIES}})
        means = {m: float(np.mean([r[m] for r in results])) for m in MEMORIES}
        variants[config.name] = {
            "mean_rmse": {m: rounded(means[m], 9) for m in manifest.memories},
            "ppum_below_olm_rate": rounded(float(np.mean([r["PPUM"] < r["OLM"] for r in results]))),
            "ppum_le_pum": means["PPUM"] <= means["PUM"],
            "pum_le_olm": means["PUM"] <= means["OLM"],
        }
    columns = ["scenario", "rep", "seed"] + [f"rmse_{m}" for m in manifest.memories]
    payload = {"case": 1, "variants": variants, "fingerprints": fingerprints, "seeds": seeds, "manifest": asdict(manifest)}
    return write_report(manifest.out, 1, rows, columns, payload)


def _benchmark_path(method: str, graph: GridGraph, start, goal):
    try:
        if method == "A*":
            return astar(graph, start, goal).points
        return congestion_astar(graph, start, goal, congestion_weight(method, graph.spec)).points
    except NoPathError as e:
        logging.warning(f"{method}: {e}")
        return None


def case2_run(config: ScenarioConfig, params: PlannerParams, crowd_size: int, map_index: int, seed: int, methods) -> dict:
    rng = np.random.default_rng([seed, map_index])
    obstacles, crowd = generate_random_map(config, crowd_size, rng, params.d_safe)
    obstacles = obstacles + scenario_obstacles(config, boundary=True)
    spec = grid_spec(config)
    truth = ground_truth_grid(crowd, spec, config.ground_truth_bandwidth)
    fm = MemoryLayer(truth, np.ones((spec.resolution,) * 2, dtype=bool), LayerKind.FM)
    model = TravelTimeModel.from_config(config.travel_time)
    start, goal = config.robot.start, config.robot.goal

    result = plan(start, goal, fm, obstacles, params, rng_seed=seed + map_index)
    t_rho = travel_time_for(result.valid_path, truth, crowd_size, model)
    row = {"crowd": crowd_size, "map": map_index, "seed": seed, "reached": result.reached, "t_RHO": t_rho}
    graph = build_grid_graph(spec, obstacles, truth, params.d_safe)
    for method in methods:
        if method == "RHO":
            continue
        path = _benchmark_path(method, graph, start, goal)
        t_bench = math.nan if path is None else travel_time_for(path, truth, crowd_size, model)
        row[f"t_{method}"] = t_bench
        row[f"Ts_{method}"] = math.nan if path is None else improvement_index(t_bench, t_rho)
    return row


def reproduce_case2(manifest: RunManifest) -> dict:
    config = load_scenario(manifest.scenario or CASE_SCENARIOS[2][0])
    if config.random_map is None:
        raise ValueError(f"scenario {config.name!r} has no random_map section")
    params = planner_params(config)
    benches = [m for m in manifest.methods if m != "RHO"]
    seeds = derive_seeds(manifest.seed, manifest.replications(2))
    jobs = [
        (config, params, crowd, k, seed, manifest.methods)
        for crowd in config.random_map.crowd_sizes
        for seed in seeds
        for k in range(config.random_map.n_maps)
    ]
    rows = run_replications(case2_run, jobs, desc=config.name)

    table = {}
    for crowd in config.random_map.crowd_sizes:
        sub = [r for r in rows if r["crowd"] == crowd]
        entry = {
            "reached_rate": rounded(float(np.mean([r["reached"] for r in sub]))),
            "mean_t": {m: rounded(float(np.nanmean([r[f"t_{m}"] for r in sub]))) for m in ["RHO"] + benches},
            "mean_Ts": {m: rounded(float(np.nanmean([r[f"Ts_{m}"] for r in sub]))) for m in benches},
        }
        if "A*" in benches:
            entry["Ts_positive_rate_astar"] = rounded(float(np.mean([r["Ts_A*"] > 0 for r in sub])))
        table[str(crowd)] = entry
    flags = {}
    if "A*" in benches:
        ts = [table[str(c)]["mean_Ts"]["A*"] for c in config.random_map.crowd_sizes]
        flags = {"ts_positive_all_sizes": all(t > 0 for t in ts), "ts_grows_with_crowd": ts[-1] > ts[0]}
    columns = ["crowd", "map", "seed", "reached", "t_RHO"] + [c for m in benches for c in (f"t_{m}", f"Ts_{m}")]
    payload = {
        "case": 2,
        "table": table,
        "flags": flags,
        "fingerprints": {config.name: config.fingerprint()},
        "seeds": seeds,
        "manifest": asdict(manifest),
    }
    return write_report(manifest.out, 2, rows, columns, payload)


def _plan_and_compare(config, params, pipeline, world, obstacles, occupancy, seed, methods) -> dict:
    spec = pipeline.spec
    t = world.time
    layers = pipeline.layers(t)
    truth = ground_truth_grid(world, spec, config.ground_truth_bandwidth)
    n_agents = len(world.agents)
    model = TravelTimeModel.from_config(config.travel_time)
    start, goal = config.robot.start, config.robot.goal

    result = plan(start, goal, layers["PPUM"], obstacles, params, rng_seed=seed)
    t_rho = travel_time_for(result.valid_path, truth, n_agents, model)
    row = {"t": t, "agents": n_agents, "reached": result.reached, "t_RHO": t_rho}
    for method, memory in CASE3_BENCHMARKS.items():
        if method not in methods:
            continue
        graph = GridGraph(spec, occupancy, None if memory is None else layers[memory].grid)
        path = _benchmark_path(method, graph, start, goal)
        t_bench = math.nan if path is None else travel_time_for(path, truth, n_agents, model)
        row[f"t_{method}"] = t_bench
        row[f"Ts_{method}"] = math.nan if path is None else improvement_index(t_bench, t_rho)
    return row


def _simulate_and_plan(config, olm_model, params, seed, plan_times, methods) -> list[dict]:
    ev = config.evaluation
    pipeline = MemoryPipeline(config, olm_model, ev.dt, seed)
    obstacles = scenario_obstacles(config)
    occupancy = build_grid_graph(pipeline.spec, obstacles, None, params.d_safe).occupancy
    world = initial_world(config, seed)
    rows = []
    pending = sorted(plan_times)
    while pending:
        world = step(world, config, ev.dt)
        pipeline.track(world)
        if world.time >= pending[0] - 1e-9:
            pending.pop(0)
            rows.append(_plan_and_compare(config, params, pipeline, world, obstacles, occupancy, seed + len(rows), methods))
    return rows


def corridor_endpoints(
    config: ScenarioConfig, rng: np.random.Generator, d_safe: float = 0.3, margin: float = 1.0, inset: float = 1.0
) -> tuple[tuple[float, float], tuple[float, float]]:
    """Random start and goal on opposite open ends of the corridor bounded by the horizontal walls."""
    ys = [w.start[1] for w in config.walls if w.start[1] == w.end[1]]
    if len(set(ys)) < 2:
        raise ValueError(f"scenario {config.name!r} has no corridor of two horizontal walls")
    lo, hi = min(ys) + inset, max(ys) - inset
    if lo >= hi:
        raise ValueError(f"corridor of {config.name!r} is narrower than twice the inset {inset}")
    obstacles = scenario_obstacles(config)
    west, east = margin, config.map_size - margin
    for _ in range(100):
        start = (west, float(rng.uniform(lo, hi)))
        goal = (east, float(rng.uniform(lo, hi)))
        if rng.random() < 0.5:
            start, goal = (east, start[1]), (west, goal[1])
        if all(math.dist(p, o.center) > o.radius + d_safe for p in (start, goal) for o in obstacles):
            return start, goal
    raise ValueError(f"could not place corridor endpoints clear of the obstacles of {config.name!r}")


def case31_run(config: ScenarioConfig, olm_model: PeriodicOlmModel, params: PlannerParams, seed: int, methods) -> list[dict]:
    ev = config.evaluation
    start, goal = corridor_endpoints(config, np.random.default_rng([seed, 31]), params.d_safe)
    config = config.model_copy(deep=True)
    config.robot.start, config.robot.goal = start, goal
    n_plans = int(round(ev.duration / ev.plan_interval))
    plan_times = [ev.start + k * ev.plan_interval for k in range(n_plans)]
    rows = _simulate_and_plan(config, olm_model, params, seed, plan_times, methods)
    for row in rows:
        row["slice"] = int((row["t"] - ev.start + 1e-9) // ev.slice_length)
        row["seed"] = seed
        row["start"] = f"{start[0]:.3f} {start[1]:.3f}"
        row["goal"] = f"{goal[0]:.3f} {goal[1]:.3f}"
    return rows


def case32_run(config: ScenarioConfig, olm_model: PeriodicOlmModel, params: PlannerParams, seed: int, n_active: int, methods) -> list[dict]:
    ev = config.evaluation
    active = schedule_activations(config, n_active, ev.duration, np.random.default_rng([seed, n_active]))
    plan_times = [ev.start + ev.duration * (k + 1) / (ev.path_samples + 1) for k in range(ev.path_samples)]
    rows = _simulate_and_plan(active, olm_model, params, seed, plan_times, methods)
    for row in rows:
        row["n_active"] = n_active
        row["seed"] = seed
    return rows


def _mean_ts(rows: list[dict], benches: list[str]) -> dict:
    return {m: rounded(float(np.nanmean([r[f"Ts_{m}"] for r in rows]))) if rows else math.nan for m in benches}


def reproduce_case3(manifest: RunManifest) -> dict:
    corridor_name, plaza_name = CASE_SCENARIOS[3]
    benches = [m for m in CASE3_BENCHMARKS if m in manifest.methods]
    seeds = derive_seeds(manifest.seed, manifest.replications(3))
    fingerprints = {}

    corridor = load_scenario(corridor_name)
    fingerprints[corridor.name] = corridor.fingerprint()
    corridor_olm = fit_olm(corridor)
    params = planner_params(corridor)
    runs = run_replications(
        case31_run, [(corridor, corridor_olm, params, s, manifest.methods) for s in seeds], desc=corridor.name
    )
    rows31 = [dict(r, part="3.1") for rs in runs for r in rs]
    n_slices = max((r["slice"] for r in rows31), default=-1) + 1
    table31 = {str(k): _mean_ts([r for r in rows31 if r["slice"] == k], benches) for k in range(n_slices)}
    table31["average"] = _mean_ts(rows31, benches)

    plaza = load_scenario(plaza_name)
    fingerprints[plaza.name] = plaza.fingerprint()
    plaza_olm = fit_olm(plaza)
    params = planner_params(plaza)
    counts = plaza.evaluation.anomaly_counts
    jobs = [(plaza, plaza_olm, params, s, n, manifest.methods) for n in counts for s in seeds]
    runs = run_replications(case32_run, jobs, desc=plaza.name)
    rows32 = [dict(r, part="3.2") for rs in runs for r in rs]
    table32 = {str(n): _mean_ts([r for r in rows32 if r["n_active"] == n], benches) for n in counts}
    table32["average"] = _mean_ts(rows32, benches)

    flags = {}
    if "A*" in benches:
        trend = [table32[str(n)]["A*"] for n in counts]
        flags = {
            "ts_positive": all(t > 0 for t in trend),
            "ts_nondecreasing": all(b >= a for a, b in zip(trend, trend[1:])),
        }
    columns = ["part", "seed", "start", "goal", "t", "slice", "n_active", "agents", "reached", "t_RHO"]
    columns += [c for m in benches for c in (f"t_{m}", f"Ts_{m}")]
    payload = {
        "case": 3,
        "time_sliced": table31,
        "anomaly_count": table32,
        "flags": flags,
        "fingerprints": fingerprints,
        "seeds": seeds,
        "manifest": asdict(manifest),
    }
    return write_report(manifest.out, 3, rows31 + rows32, columns, payload)


def reproduce(case: int, manifest: RunManifest) -> dict:
    runners = {1: reproduce_case1, 2: reproduce_case2, 3: reproduce_case3}
    if case not in runners:
        raise ValueError(f"unknown case {case}, expected one of {sorted(runners)}")
    return runners[case](manifest)
