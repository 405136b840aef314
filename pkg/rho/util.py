from dataclasses import asdict, replace

from .planner import OptimizerSettings, PlannerParams

configs = {
    "default": PlannerParams(),
    # 20 m corridor and 20x20 m random maps on a 0.25 m grid
    "corridor": PlannerParams(
        n=5,
        d_l=4.0,
        d_s=0.5,
        d_safe=0.3,
        alpha=200.0,
        restarts=6,
    ),
    # 70x70 m open map on a 0.5 m grid
    "plaza": PlannerParams(
        n=5,
        d_l=8.0,
        d_s=1.0,
        d_safe=0.3,
        alpha=400.0,
        restarts=6,
        optimizer=OptimizerSettings(max_iterations=40),
    ),
}


def load_planner_params(name: str = "default", **overrides) -> PlannerParams:
    """Copy of a named preset with `overrides` applied; derived spacings are recomputed."""
    if name not in configs:
        raise ValueError(f"unknown planner preset {name!r}, available: {sorted(configs)}")
    base = configs[name]
    optimizer = overrides.pop("optimizer", None)
    if isinstance(optimizer, dict):
        optimizer = replace(base.optimizer, **optimizer)
    fields = asdict(base)
    fields.pop("optimizer")
    if "d_l" in overrides or "n" in overrides:
        # spacings derived from the look-ahead follow it unless given explicitly
        fields["d_I"] = None
        fields["d_r"] = None
    fields.update(overrides)
    return PlannerParams(**fields, optimizer=optimizer or replace(base.optimizer))
