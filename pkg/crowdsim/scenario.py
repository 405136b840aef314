import hashlib
import json
import logging
import math
import re
from copy import deepcopy
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from .constants import DEFAULT_GROUP_SIZE, DEFAULT_SPEED, GATE_TOLERANCE, GROUND_TRUTH_BANDWIDTH

Point = tuple[float, float]


class ScenarioError(ValueError):
    """Schema violation anchored to a line of the scenario source."""

    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.message = message
        self.line = line
        self.source = source
        where = f"{source or '<scenario>'}:{line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class Normal(BaseModel):
    mean: float
    std: float = Field(0.0, ge=0.0)


class Wall(BaseModel):
    start: Point
    end: Point

    @model_validator(mode="after")
    def _axis_aligned(self):
        if self.start[0] != self.end[0] and self.start[1] != self.end[1]:
            raise ValueError(f"wall {self.start} -> {self.end} is not axis-aligned")
        return self


class Gate(BaseModel):
    name: str
    position: Point


class Flow(BaseModel):
    name: Optional[str] = None
    entry: str
    exit: str
    period: float = Field(gt=0.0)
    offset: float = Field(0.0, ge=0.0)
    group_size: Normal = Normal(mean=DEFAULT_GROUP_SIZE[0], std=DEFAULT_GROUP_SIZE[1])
    speed: Normal = Normal(mean=DEFAULT_SPEED[0], std=DEFAULT_SPEED[1])
    via: list[Point] = []
    # lateral spread of spawn points and route offsets
    spread: float = Field(0.5, ge=0.0)
    until: Optional[float] = None

    @field_validator("speed")
    @classmethod
    def _positive_speed(cls, v: Normal):
        if v.mean <= 0:
            raise ValueError(f"mean speed must be > 0, got {v.mean}")
        return v


class AttractorConfig(BaseModel):
    center: Point
    radius: float = Field(gt=0.0)
    dwell: float = Field(ge=0.0)
    active: list[tuple[float, float]] = [(0.0, 1e12)]

    @field_validator("active")
    @classmethod
    def _ordered(cls, intervals):
        for t_on, t_off in intervals:
            if t_off < t_on:
                raise ValueError(f"active interval ({t_on}, {t_off}) ends before it starts")
        return intervals

    def is_active(self, t: float) -> bool:
        return any(t_on <= t < t_off for t_on, t_off in self.active)


class ObstacleConfig(BaseModel):
    center: Point
    radius: float = Field(gt=0.0)


class SensorConfig(BaseModel):
    pose: Point
    fov_radius: float = Field(6.0, gt=0.0)
    sigma: float = Field(0.05, ge=0.0)
    accel_noise: float = Field(0.5, ge=0.0)


class RobotQuery(BaseModel):
    start: Point
    goal: Point


class RandomMapConfig(BaseModel):
    n_obstacles: int = Field(15, ge=0)
    obstacle_radius: tuple[float, float] = (0.3, 1.0)
    crowd_sizes: list[int] = [30, 60, 100]
    n_clusters: int = Field(3, ge=1)
    cluster_std: float = Field(1.2, gt=0.0)
    n_maps: int = Field(30, ge=1)
    keep_clear: float = Field(1.5, ge=0.0)


class OlmConfig(BaseModel):
    cycle_length: float = Field(gt=0.0)
    bin_width: float = Field(gt=0.0)
    bandwidth: float = Field(0.5, gt=0.0)
    warmup: float = Field(60.0, ge=0.0)
    duration: float = Field(300.0, gt=0.0)
    max_components: int = Field(400, ge=1)


class TravelTimeConfig(BaseModel):
    half_width: float = Field(0.5, gt=0.0)
    v_max: float = Field(1.2, gt=0.0)
    beta: float = Field(math.log(2.0), ge=0.0)


class EvaluationConfig(BaseModel):
    duration: float = Field(80.0, gt=0.0)
    start: float = Field(60.0, ge=0.0)
    dt: float = Field(0.5, gt=0.0)
    plan_interval: float = Field(60.0, gt=0.0)
    slice_length: float = Field(300.0, gt=0.0)
    pum_horizon: float = Field(40.0, gt=0.0)
    pum_update_interval: float = Field(10.0, gt=0.0)
    anomaly_counts: list[int] = [0, 5, 10, 15, 20]
    activation_length: float = Field(180.0, gt=0.0)
    path_samples: int = Field(3, ge=1)


class Seeds(BaseModel):
    world: int = 0
    sensor: int = 1


class ScenarioConfig(BaseModel):
    name: str
    map_size: float = Field(gt=0.0)
    grid_cell: float = Field(0.25, gt=0.0)
    walls: list[Wall] = []
    gates: list[Gate] = []
    flows: list[Flow] = []
    attractors: list[AttractorConfig] = []
    obstacles: list[ObstacleConfig] = []
    robot: RobotQuery
    sensor: Optional[SensorConfig] = None
    planner: str = "default"
    planner_overrides: dict = {}
    gamma: float = Field(20.0, gt=0.0)
    ground_truth_bandwidth: float = Field(GROUND_TRUTH_BANDWIDTH, gt=0.0)
    olm: Optional[OlmConfig] = None
    random_map: Optional[RandomMapConfig] = None
    travel_time: TravelTimeConfig = TravelTimeConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    seeds: Seeds = Seeds()

    def gate(self, name: str) -> Gate:
        for g in self.gates:
            if g.name == name:
                return g
        raise KeyError(name)

    def fingerprint(self) -> str:
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf8")).hexdigest()


def _reference_errors(config: ScenarioConfig) -> list[tuple[tuple, str]]:
    errors = []
    names = {g.name for g in config.gates}
    size = config.map_size
    for i, g in enumerate(config.gates):
        x, y = g.position
        on_edge = min(abs(x), abs(y), abs(size - x), abs(size - y)) <= GATE_TOLERANCE
        inside = -GATE_TOLERANCE <= x <= size + GATE_TOLERANCE and -GATE_TOLERANCE <= y <= size + GATE_TOLERANCE
        if not (on_edge and inside):
            errors.append((("gates", i, "position"), f"gate '{g.name}' at {g.position} is not on the map boundary"))
    for i, f in enumerate(config.flows):
        label = f.name or f"flow{i}"
        for key in ("entry", "exit"):
            if getattr(f, key) not in names:
                errors.append((("flows", i, key), f"unknown gate '{getattr(f, key)}' in flow '{label}'"))
    return errors


def _skip_ws(text: str, pos: int) -> int:
    while pos < len(text) and text[pos] in " \t\r\n":
        pos += 1
    return pos


def _line_of(text: str, loc) -> int:
    """1-based line where the JSON element at `loc` starts (or the deepest element found)."""
    decoder = json.JSONDecoder()
    pos = _skip_ws(text, 0)
    for key in loc:
        if pos >= len(text) or text[pos] not in "{[":
            break
        is_object = text[pos] == "{"
        pos = _skip_ws(text, pos + 1)
        index = 0
        found = False
        while pos < len(text) and text[pos] not in "}]":
            if is_object:
                name, pos = decoder.raw_decode(text, pos)
                pos = _skip_ws(text, _skip_ws(text, pos) + 1)
                match = name == key
            else:
                match = index == key
            if match:
                found = True
                break
            _, pos = decoder.raw_decode(text, pos)
            pos = _skip_ws(text, pos)
            if pos < len(text) and text[pos] == ",":
                pos = _skip_ws(text, pos + 1)
            index += 1
        if not found:
            break
    return text.count("\n", 0, pos) + 1


def parse_scenario(text: str, source: str | None = None) -> ScenarioConfig:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"invalid JSON: {e.msg}", e.lineno, source) from e
    try:
        config = ScenarioConfig.model_validate(payload)
    except ValidationError as e:
        err = e.errors()[0]
        path = ".".join(str(p) for p in err["loc"])
        raise ScenarioError(f"{path}: {err['msg']}", _line_of(text, err["loc"]), source) from e
    errors = _reference_errors(config)
    if errors:
        loc, message = errors[0]
        raise ScenarioError(message, _line_of(text, loc), source)
    return config


_SCENARIO_CONFIG_PATHS = [Path(__file__).parent / "scenario_configs/"]
_SCENARIO_CONFIGS = {}  # scenario name -> raw JSON text


def _natural_key(string_):
    return [int(s) if s.isdigit() else s for s in re.split(r"(\d+)", string_.lower())]


def _rescan_scenario_configs():
    global _SCENARIO_CONFIGS

    config_files = []
    for config_path in _SCENARIO_CONFIG_PATHS:
        if config_path.is_file() and config_path.suffix == ".json":
            config_files.append(config_path)
        elif config_path.is_dir():
            config_files.extend(config_path.glob("*.json"))

    for cf in config_files:
        with open(cf, "r", encoding="utf8") as f:
            text = f.read()
        try:
            payload = json.loads(text)
        except json.JSONDecodeError:
            logging.warning(f"skipping unreadable scenario config {cf}")
            continue
        if all(k in payload for k in ("name", "map_size", "robot")):
            _SCENARIO_CONFIGS[cf.stem] = text

    _SCENARIO_CONFIGS = dict(sorted(_SCENARIO_CONFIGS.items(), key=lambda x: _natural_key(x[0])))


_rescan_scenario_configs()


def list_scenarios():
    """bundled and registered scenario names"""
    return list(_SCENARIO_CONFIGS.keys())


def add_scenario_config(path):
    if not isinstance(path, Path):
        path = Path(path)
    _SCENARIO_CONFIG_PATHS.append(path)
    _rescan_scenario_configs()


def get_scenario_config(name: str) -> dict | None:
    if name in _SCENARIO_CONFIGS:
        return deepcopy(json.loads(_SCENARIO_CONFIGS[name]))
    return None


def load_scenario(name_or_path: str) -> ScenarioConfig:
    """Registered scenario name or path to a JSON file."""
    if name_or_path in _SCENARIO_CONFIGS:
        return parse_scenario(_SCENARIO_CONFIGS[name_or_path], f"{name_or_path}.json")
    path = Path(name_or_path)
    if not path.is_file():
        raise ScenarioError(f"unknown scenario {name_or_path!r}, available: {list_scenarios()}")
    return parse_scenario(path.read_text(encoding="utf8"), str(path))
