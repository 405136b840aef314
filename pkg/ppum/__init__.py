from .gridmap import (
    GaussianComponent,
    GridSpec,
    MixtureModel,
    ProbabilityGrid,
    evaluate_density,
    grid_rmse,
    isotropic_mixture,
    probability_at,
    rasterize_normalize,
    uniform_grid,
)
from .io import export_pgm, load_grid, save_grid
from .memory import (
    FusionConfig,
    LayerKind,
    MassAssignment,
    MemoryLayer,
    PartiallyUpdatedMemory,
    PeriodicOlmModel,
    VacuousFusionError,
    ds_combine,
    fuse_layers,
    olm_predict,
)
from .tracking import FilterDivergenceError, Measurement, SensorModel, TrackBank, TrackState, kf_step
