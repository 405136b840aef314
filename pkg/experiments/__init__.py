from .cases import MEMORIES, METHODS, MemoryPipeline, RunManifest, fit_olm, memory_at, reproduce
from .evaluate import (
    RmseSeries,
    TravelTimeModel,
    corridor_count,
    expected_travel_time,
    improvement_index,
    rmse_series,
    travel_time_for,
)
from .utils import derive_seeds, run_replications, seed_everything
