import csv
import logging
import os
from copy import deepcopy
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

from ppum.gridmap import GridSpec, ProbabilityGrid, isotropic_mixture, rasterize_normalize, uniform_grid
from ppum.tracking import Measurement, SensorModel
from rho.geometry import segment_distance
from rho.planner import Obstacle, wall_disc_cover

from .constants import MIN_SPEED, PLACEMENT_TRIES, WALL_GAIN, WALL_MARGIN
from .scenario import AttractorConfig, ScenarioConfig


class Phase(str, Enum):
    TRANSIT = "transit"
    ATTRACTED = "attracted"
    DWELLING = "dwelling"
    RESUMING = "resuming"


@dataclass
class Agent:
    id: int
    flow: int
    position: np.ndarray
    velocity: np.ndarray
    speed: float
    route: list[np.ndarray]
    route_index: int = 0
    phase: Phase = Phase.TRANSIT
    attractor: int | None = None
    dwell_spot: np.ndarray | None = None
    dwell_left: float = 0.0
    visited: set[int] = field(default_factory=set)


@dataclass
class WorldState:
    time: float = 0.0
    agents: list[Agent] = field(default_factory=list)
    spawned: int = 0
    exited: int = 0
    next_id: int = 0
    next_spawn: list[float] = field(default_factory=list)
    # independent streams so that attractor draws never shift spawning
    rngs: dict[str, np.random.Generator] = field(default_factory=dict)
    events: list[str] = field(default_factory=list)

    @property
    def positions(self) -> np.ndarray:
        return np.array([a.position for a in self.agents], dtype=np.float64).reshape(-1, 2)


def initial_world(config: ScenarioConfig, seed: int | None = None) -> WorldState:
    seed = config.seeds.world if seed is None else seed
    spawn, attract = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    return WorldState(next_spawn=[f.offset for f in config.flows], rngs={"spawn": spawn, "attract": attract})


def _clip(point: np.ndarray, size: float) -> np.ndarray:
    return np.clip(point, 0.0, size)


def _spawn(world: WorldState, config: ScenarioConfig) -> None:
    rng = world.rngs["spawn"]
    for k, flow in enumerate(config.flows):
        while world.next_spawn[k] <= world.time + 1e-9:
            if flow.until is not None and world.next_spawn[k] > flow.until:
                world.next_spawn[k] = np.inf
                break
            group = max(1, int(round(rng.normal(flow.group_size.mean, flow.group_size.std))))
            entry = np.asarray(config.gate(flow.entry).position, dtype=np.float64)
            exit_ = np.asarray(config.gate(flow.exit).position, dtype=np.float64)
            for _ in range(group):
                offset = rng.normal(0.0, flow.spread, size=2) if flow.spread > 0 else np.zeros(2)
                speed = max(MIN_SPEED, rng.normal(flow.speed.mean, flow.speed.std))
                route = [_clip(np.asarray(v, dtype=np.float64) + offset, config.map_size) for v in flow.via]
                route.append(_clip(exit_ + offset, config.map_size))
                world.agents.append(
                    Agent(
                        id=world.next_id,
                        flow=k,
                        position=_clip(entry + offset, config.map_size),
                        velocity=np.zeros(2),
                        speed=float(speed),
                        route=route,
                    )
                )
                world.next_id += 1
                world.spawned += 1
            world.next_spawn[k] += flow.period


def _wall_push(position: np.ndarray, config: ScenarioConfig) -> np.ndarray:
    push = np.zeros(2)
    for wall in config.walls:
        a, b = np.asarray(wall.start, dtype=np.float64), np.asarray(wall.end, dtype=np.float64)
        d = float(segment_distance(position, a, b)[0])
        if 1e-9 < d < WALL_MARGIN:
            t = np.clip((position - a) @ (b - a) / max((b - a) @ (b - a), 1e-12), 0.0, 1.0)
            normal = (position - (a + t * (b - a))) / d
            push += WALL_GAIN * (WALL_MARGIN - d) / WALL_MARGIN * normal
    return push


def _advance(agent: Agent, target: np.ndarray, speed: float, dt: float, config: ScenarioConfig) -> bool:
    """Move toward target; True once the target is reached this step."""
    delta = target - agent.position
    dist = float(np.linalg.norm(delta))
    if dist <= speed * dt:
        agent.velocity = delta / dt
        agent.position = target.copy()
        return True
    velocity = speed * delta / dist + speed * _wall_push(agent.position, config)
    agent.velocity = velocity
    agent.position = _clip(agent.position + velocity * dt, config.map_size)
    return False


def _nearby_attractor(agent: Agent, attractors: list[AttractorConfig], t: float) -> int | None:
    for k, attractor in enumerate(attractors):
        if k in agent.visited or not attractor.is_active(t):
            continue
        if np.linalg.norm(agent.position - attractor.center) <= attractor.radius:
            return k
    return None


def _release(agent: Agent) -> None:
    agent.phase = Phase.RESUMING
    agent.dwell_spot = None


def _move(agent: Agent, world: WorldState, config: ScenarioConfig, dt: float) -> bool:
    """Advance one agent; True when it reached its exit."""
    t = world.time
    attractors = config.attractors
    if agent.phase in (Phase.ATTRACTED, Phase.DWELLING) and not attractors[agent.attractor].is_active(t):
        _release(agent)

    if agent.phase == Phase.TRANSIT:
        k = _nearby_attractor(agent, attractors, t)
        if k is not None:
            attractor = attractors[k]
            rng = world.rngs["attract"]
            r = 0.5 * attractor.radius * np.sqrt(rng.uniform())
            angle = rng.uniform(0.0, 2.0 * np.pi)
            agent.phase = Phase.ATTRACTED
            agent.attractor = k
            agent.dwell_spot = np.asarray(attractor.center) + r * np.array([np.cos(angle), np.sin(angle)])

    if agent.phase == Phase.ATTRACTED:
        if _advance(agent, agent.dwell_spot, agent.speed, dt, config):
            agent.phase = Phase.DWELLING
            agent.dwell_left = attractors[agent.attractor].dwell
        return False
    if agent.phase == Phase.DWELLING:
        agent.velocity = np.zeros(2)
        agent.dwell_left -= dt
        if agent.dwell_left <= 0.0:
            _release(agent)
        return False

    target = agent.route[agent.route_index]
    if agent.phase == Phase.RESUMING:
        attractor = attractors[agent.attractor]
        if np.linalg.norm(agent.position - attractor.center) > attractor.radius:
            agent.visited.add(agent.attractor)
            agent.phase = Phase.TRANSIT
            agent.attractor = None
    if _advance(agent, target, agent.speed, dt, config):
        agent.route_index += 1
        return agent.route_index >= len(agent.route)
    return False


def _activation_events(config: ScenarioConfig, t0: float, t1: float) -> list[str]:
    events = []
    for k, attractor in enumerate(config.attractors):
        for t_on, _ in attractor.active:
            if t0 <= t_on < t1:
                events.append(f"attractor {k} activated at t={t_on:.1f}s")
    return events


def step(world: WorldState, config: ScenarioConfig, dt: float) -> WorldState:
    """Advance a copy of `world` by dt seconds."""
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    world = deepcopy(world)
    world.events = _activation_events(config, world.time, world.time + dt)
    for event in world.events:
        logging.info(event)
    if config.flows:
        _spawn(world, config)
    remaining = []
    for agent in world.agents:
        if _move(agent, world, config, dt):
            world.exited += 1
        else:
            remaining.append(agent)
    world.agents = remaining
    world.time += dt
    return world


def run(config: ScenarioConfig, duration: float, dt: float, snapshot_every: int = 1, seed: int | None = None) -> Iterator[WorldState]:
    """Yields the initial world and then every `snapshot_every`-th step up to `duration`."""
    world = initial_world(config, seed)
    yield world
    n_steps = int(round(duration / dt))
    for i in range(1, n_steps + 1):
        world = step(world, config, dt)
        if i % snapshot_every == 0:
            yield world


def observe(world: WorldState, robot_pose, sensor: SensorModel, rng: np.random.Generator) -> list[Measurement]:
    pose = np.asarray(robot_pose, dtype=np.float64)[:2]
    out = []
    for agent in sorted(world.agents, key=lambda a: a.id):
        if np.linalg.norm(agent.position - pose) <= sensor.fov_radius:
            noisy = rng.multivariate_normal(agent.position, sensor.measurement_noise)
            out.append(Measurement(agent.id, noisy))
    return out


def ground_truth_grid(world_or_positions, spec: GridSpec, bandwidth: float = 0.5) -> ProbabilityGrid:
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    positions = world_or_positions.positions if isinstance(world_or_positions, WorldState) else np.asarray(world_or_positions)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if len(positions) == 0:
        logging.warning("empty world, ground truth falls back to a uniform grid")
        return uniform_grid(spec)
    return rasterize_normalize(isotropic_mixture(positions, bandwidth), spec)


def write_trajectory_csv(snapshots, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t", "id", "x", "y", "vx", "vy", "phase"])
        for world in snapshots:
            for a in world.agents:
                writer.writerow(
                    [
                        f"{world.time:.3f}",
                        a.id,
                        f"{a.position[0]:.6f}",
                        f"{a.position[1]:.6f}",
                        f"{a.velocity[0]:.6f}",
                        f"{a.velocity[1]:.6f}",
                        a.phase.value,
                    ]
                )
    return path


def schedule_activations(config: ScenarioConfig, n_activations: int, duration: float, rng: np.random.Generator, length: float | None = None) -> ScenarioConfig:
    """Copy of `config` whose attractors are switched on `n_activations` times at random."""
    if not config.attractors and n_activations:
        raise ValueError("scenario has no attractors to activate")
    length = config.evaluation.activation_length if length is None else length
    config = config.model_copy(deep=True)
    for attractor in config.attractors:
        attractor.active = []
    for _ in range(n_activations):
        k = int(rng.integers(len(config.attractors)))
        t_on = float(rng.uniform(0.0, max(duration - length, 0.0)))
        config.attractors[k].active.append((t_on, t_on + length))
    for attractor in config.attractors:
        attractor.active.sort()
    return config


def scenario_obstacles(config: ScenarioConfig, wall_radius: float = 0.2, boundary: bool = False) -> list[Obstacle]:
    """Disc obstacles plus disc covers of the walls and, optionally, of the map edges."""
    obstacles = [Obstacle(tuple(o.center), o.radius) for o in config.obstacles]
    walls = [(w.start, w.end) for w in config.walls]
    if boundary:
        s = config.map_size
        walls += [((0.0, 0.0), (s, 0.0)), ((s, 0.0), (s, s)), ((s, s), (0.0, s)), ((0.0, s), (0.0, 0.0))]
    for wall in walls:
        obstacles.extend(wall_disc_cover(wall, wall_radius))
    return obstacles


def generate_random_map(config: ScenarioConfig, crowd_size: int, rng: np.random.Generator, d_safe: float = 0.3):
    """Random disc obstacles and a clustered static crowd, keeping the robot's start and goal clear."""
    spec = config.random_map
    if spec is None:
        raise ValueError(f"scenario {config.name!r} has no random_map section")
    size = config.map_size
    anchors = [np.asarray(config.robot.start), np.asarray(config.robot.goal)]
    clear = spec.keep_clear

    obstacles: list[Obstacle] = []
    tries = 0
    while len(obstacles) < spec.n_obstacles:
        tries += 1
        if tries > PLACEMENT_TRIES * max(1, spec.n_obstacles):
            raise ValueError(f"could not place {spec.n_obstacles} obstacles on a {size} m map")
        radius = float(rng.uniform(*spec.obstacle_radius))
        center = rng.uniform(1.0, size - 1.0, size=2)
        if any(np.linalg.norm(center - a) < radius + d_safe + clear for a in anchors):
            continue
        if any(np.linalg.norm(center - o.center) < radius + o.radius for o in obstacles):
            continue
        obstacles.append(Obstacle(tuple(center), radius))

    margin = min(3.0, size / 4.0)
    centers = []
    tries = 0
    while len(centers) < spec.n_clusters:
        tries += 1
        if tries > PLACEMENT_TRIES * spec.n_clusters:
            raise ValueError(f"could not place {spec.n_clusters} crowd clusters clear of the start and goal")
        c = rng.uniform(margin, size - margin, size=2)
        if all(np.linalg.norm(c - a) >= 2.0 * clear for a in anchors):
            centers.append(c)
    positions = []
    tries = 0
    while len(positions) < crowd_size:
        tries += 1
        if tries > PLACEMENT_TRIES * max(1, crowd_size):
            raise ValueError(f"could not place {crowd_size} people outside the obstacles")
        c = centers[int(rng.integers(len(centers)))]
        p = _clip(rng.normal(c, spec.cluster_std), size)
        if any(np.linalg.norm(p - o.center) < o.radius for o in obstacles):
            continue
        positions.append(p)
    return obstacles, np.array(positions, dtype=np.float64).reshape(-1, 2)
