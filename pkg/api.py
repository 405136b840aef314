import os
import re
import time
import uuid
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse, JSONResponse
from pydantic import BaseModel

from crowdsim.scenario import ScenarioError, load_scenario
from crowdsim.simulator import scenario_obstacles
from experiments.cases import MEMORIES, fit_olm, grid_spec, memory_at, planner_params
from ppum.gridmap import GridSpec, ProbabilityGrid
from ppum.io import export_pgm
from ppum.memory import LayerKind, MemoryLayer
from rho.planner import Obstacle, plan
from rho.util import load_planner_params

CURRENT_FOLDER = os.path.dirname(os.path.abspath(__file__))
OUTPUT_FOLDER = os.getenv("PPUM_OUTPUT", os.path.join(CURRENT_FOLDER, "output"))
os.makedirs(OUTPUT_FOLDER, exist_ok=True)


app = FastAPI()
_olm_cache = {}


class GridPayload(BaseModel):
    side_length: float
    resolution: int
    origin: tuple[float, float] = (0.0, 0.0)
    values: list[float]


class ObstaclePayload(BaseModel):
    center: tuple[float, float]
    radius: float


class PlanRequest(BaseModel):
    start: tuple[float, float]
    goal: tuple[float, float]
    grid: Optional[GridPayload] = None
    scenario: Optional[str] = None
    obstacles: list[ObstaclePayload] = []
    planner: str = "default"
    seed: int = 0


class FuseRequest(BaseModel):
    scenario: str
    time: Optional[float] = None
    seed: Optional[int] = None
    memory: str = "PPUM"


def _grid(payload: GridPayload) -> ProbabilityGrid:
    spec = GridSpec(payload.side_length, payload.resolution, payload.origin)
    values = np.asarray(payload.values, dtype=np.float64).reshape(spec.resolution, spec.resolution)
    return ProbabilityGrid(spec, values)


def _olm(config):
    key = config.fingerprint()
    if key not in _olm_cache:
        _olm_cache[key] = fit_olm(config)
    return _olm_cache[key]


def _save_heatmap(grid: ProbabilityGrid) -> str:
    name = f"{uuid.uuid4()}.pgm"
    export_pgm(grid, os.path.join(OUTPUT_FOLDER, name))
    return name


@app.post("/plan")
async def plan_endpoint(request: PlanRequest):
    start_time = time.time()
    try:
        obstacles = [Obstacle(o.center, o.radius) for o in request.obstacles]
        if request.scenario:
            config = load_scenario(request.scenario)
            params = planner_params(config)
            obstacles += scenario_obstacles(config)
        else:
            params = load_planner_params(request.planner)
        fm = None
        if request.grid is not None:
            grid = _grid(request.grid)
            fm = MemoryLayer(grid, np.ones((grid.spec.resolution,) * 2, dtype=bool), LayerKind.FM)
        result = plan(request.start, request.goal, fm, obstacles, params, rng_seed=request.seed)
    except (ScenarioError, ValueError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    return JSONResponse(content=dict(result.to_dict(), planning_time=time.time() - start_time))


@app.post("/fuse")
async def fuse_endpoint(request: FuseRequest):
    if request.memory not in MEMORIES:
        raise HTTPException(status_code=400, detail=f"memory must be one of {list(MEMORIES)}")
    start_time = time.time()
    try:
        config = load_scenario(request.scenario)
        t = config.evaluation.start if request.time is None else request.time
        _, layers = memory_at(config, _olm(config), t, request.seed)
    except (ScenarioError, ValueError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    grid = layers[request.memory].grid
    spec = grid_spec(config)
    return JSONResponse(
        content={
            "heatmap": _save_heatmap(grid),
            "side_length": spec.side_length,
            "resolution": spec.resolution,
            "origin": list(spec.origin),
            "values": grid.values.reshape(-1).tolist(),
            "fusion_time": time.time() - start_time,
        }
    )


@app.get("/download_heatmap/{name}")
async def download_heatmap(name: str):
    if not re.match(r"^[0-9a-fA-F-]{36}\.pgm$", name):
        raise HTTPException(status_code=400, detail="Invalid heatmap name format")

    path = os.path.join(OUTPUT_FOLDER, name)
    if not os.path.exists(path):
        raise HTTPException(status_code=404, detail="Heatmap not found")

    return FileResponse(path, media_type="image/x-portable-graymap", filename=name)


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(app, host="0.0.0.0", port=8080)
