import argparse
import json
import logging
import os
import sys
import time

import numpy as np
from tqdm import tqdm

from crowdsim.scenario import ScenarioError, load_scenario
from crowdsim.simulator import ground_truth_grid, run, scenario_obstacles, schedule_activations, write_trajectory_csv
from experiments.cases import (
    MEMORIES,
    METHODS,
    RunManifest,
    fit_olm,
    grid_spec,
    memory_at,
    planner_params,
    reproduce,
)
from experiments.evaluate import TravelTimeModel, rmse_series, travel_time_for
from experiments.utils import seed_everything
from ppum.io import export_pgm, export_png, load_grid, save_grid
from ppum.memory import LayerKind, MemoryLayer, load_olm_schedule, save_olm_schedule
from rho.baselines import NoPathError, astar, build_grid_graph, congestion_astar, congestion_weight
from rho.planner import path_to_json, plan

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _olm_model(config, args):
    if args.olm and os.path.exists(args.olm):
        return load_olm_schedule(args.olm)
    model = fit_olm(config)
    save_olm_schedule(model, os.path.join(args.out, f"{config.name}_olm.json"))
    return model


def _write_heatmaps(grid, stem: str) -> None:
    export_pgm(grid, f"{stem}.pgm")
    if not export_png(grid, f"{stem}.png"):
        logging.info("colour heatmap skipped")


def cmd_simulate(args) -> int:
    config = load_scenario(args.scenario)
    seed = config.seeds.world if args.seed is None else args.seed
    duration = args.duration or config.evaluation.start + config.evaluation.duration
    dt = config.evaluation.dt
    if args.activations is not None:
        config = schedule_activations(config, args.activations, duration, np.random.default_rng([seed, args.activations]))
    print(f"Simulating {config.name} for {duration:.0f}s with seed {seed}")
    t0 = time.perf_counter()
    snapshots = list(tqdm(run(config, duration, dt, seed=seed), total=int(round(duration / dt)) + 1, leave=False))
    stem = os.path.join(args.out, f"{config.name}_seed{seed}")
    write_trajectory_csv(snapshots, f"{stem}_trajectory.csv")
    events = [event for world in snapshots for event in world.events]
    with open(f"{stem}_events.txt", "w") as f:
        f.writelines(f"{event}\n" for event in events)
    for event in events:
        print(event)
    truth = ground_truth_grid(snapshots[-1], grid_spec(config), config.ground_truth_bandwidth)
    save_grid(truth, f"{stem}_truth.safetensors")
    _write_heatmaps(truth, f"{stem}_truth")
    print(f"Done in {time.perf_counter() - t0:.1f}s.")
    return EXIT_OK


def cmd_fuse(args) -> int:
    config = load_scenario(args.scenario)
    seed = config.seeds.world if args.seed is None else args.seed
    t = config.evaluation.start if args.time is None else args.time
    print(f"Building {', '.join(args.memory)} for {config.name} at t={t:.1f}s with seed {seed}")
    t0 = time.perf_counter()
    world, layers = memory_at(config, _olm_model(config, args), t, seed)
    for name in args.memory:
        stem = os.path.join(args.out, f"{config.name}_seed{seed}_{name}")
        save_grid(layers[name].grid, f"{stem}.safetensors")
        _write_heatmaps(layers[name].grid, stem)
    truth = ground_truth_grid(world, grid_spec(config), config.ground_truth_bandwidth)
    save_grid(truth, os.path.join(args.out, f"{config.name}_seed{seed}_truth.safetensors"))
    print(f"Done in {time.perf_counter() - t0:.1f}s.")
    return EXIT_OK


def cmd_plan(args) -> int:
    config = load_scenario(args.scenario)
    seed = config.seeds.world if args.seed is None else args.seed
    spec = grid_spec(config)
    if args.grid:
        fm = load_grid(args.grid)
    else:
        t = config.evaluation.start if args.time is None else args.time
        _, layers = memory_at(config, _olm_model(config, args), t, seed)
        fm = layers[args.memory].grid
    params = planner_params(config)
    obstacles = scenario_obstacles(config)
    start, goal = config.robot.start, config.robot.goal
    graph = None
    for method in args.method:
        print(f"Planning {config.name} with {method} and seed {seed}")
        out = os.path.join(args.out, f"{config.name}_seed{seed}_{method.replace('*', 'star')}_path.json")
        if method == "RHO":
            layer = MemoryLayer(fm, np.ones((spec.resolution,) * 2, dtype=bool), LayerKind.FM)
            result = plan(start, goal, layer, obstacles, params, rng_seed=seed)
            path_to_json(result, out)
            if not result.reached:
                logging.warning(f"RHO stopped short of the goal: {'; '.join(result.diagnostics)}")
            continue
        if graph is None:
            graph = build_grid_graph(spec, obstacles, fm, params.d_safe)
        try:
            path = astar(graph, start, goal) if method == "A*" else congestion_astar(graph, start, goal, congestion_weight(method, spec))
        except NoPathError as e:
            logging.warning(f"{method}: {e}")
            continue
        with open(out, "w") as f:
            json.dump({"method": method, "valid_path": path.points.tolist(), "reached": True, "cost": path.cost}, f, indent=1)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = load_scenario(args.scenario)
    truth = load_grid(args.truth)
    result = {}
    if args.grid:
        result["rmse"] = rmse_series([(0.0, load_grid(args.grid))], [(0.0, truth)]).average
    if args.path:
        with open(args.path) as f:
            path = json.load(f)["valid_path"]
        model = TravelTimeModel.from_config(config.travel_time)
        result["travel_time"] = travel_time_for(path, truth, args.agents, model)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_reproduce(args) -> int:
    manifest = RunManifest(args.scenario, tuple(args.method), tuple(args.memory), args.reps, args.seed or 0, args.out)
    print(f"Reproducing case {args.case} with master seed {manifest.seed}")
    t0 = time.perf_counter()
    payload = reproduce(args.case, manifest)
    print(f"Report digest {payload['body_sha256'][:12]}, done in {time.perf_counter() - t0:.1f}s.")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Crowd-aware memory fusion and receding-horizon planning")
    parser.add_argument("--log-level", type=str, default="WARNING", help="logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario_required=True, single_memory=False):
        p.add_argument("--scenario", type=str, required=scenario_required, help="bundled scenario name or JSON path")
        p.add_argument("--seed", type=int, default=None, help="world seed (defaults to the scenario's)")
        p.add_argument("--out", type=str, default="output", help="output directory")
        p.add_argument("--olm", type=str, default=None, help="OLM schedule JSON; fitted and saved when missing")
        p.add_argument("--method", nargs="+", default=list(METHODS), choices=METHODS)
        if single_memory:
            p.add_argument("--memory", type=str, default="PPUM", choices=MEMORIES, help="memory layer to plan on")
        else:
            p.add_argument("--memory", nargs="+", default=list(MEMORIES), choices=MEMORIES)

    p = sub.add_parser("simulate", help="run a scenario and write trajectories and ground truth")
    common(p)
    p.add_argument("--duration", type=float, default=None, help="simulated seconds")
    p.add_argument("--activations", type=int, default=None, help="random attractor activations replacing the scenario's windows")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fuse", help="build OLM, PUM and PPUM layers at a given time")
    common(p)
    p.add_argument("--time", type=float, default=None, help="simulation time of the memory snapshot")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("plan", help="plan the scenario's robot query")
    common(p, single_memory=True)
    p.add_argument("--time", type=float, default=None, help="simulation time to plan at")
    p.add_argument("--grid", type=str, default=None, help="memory grid file to plan on")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("evaluate", help="score a memory grid or a path against a ground-truth grid")
    common(p)
    p.add_argument("--truth", type=str, required=True)
    p.add_argument("--grid", type=str, default=None)
    p.add_argument("--path", type=str, default=None)
    p.add_argument("--agents", type=int, default=0, help="crowd size behind the truth grid")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reproduce", help="run a whole case study and write its report")
    common(p, scenario_required=False)
    p.add_argument("--case", type=int, required=True, choices=[1, 2, 3])
    p.add_argument("--reps", type=int, default=None, help="replications (case default when omitted)")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    try:
        os.makedirs(args.out, exist_ok=True)
        if args.seed is not None:
            seed_everything(args.seed)
        return args.func(args)
    except ScenarioError as e:
        print(f"scenario error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logging.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
