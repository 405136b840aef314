"""
Memory layers and their fusion.

The Off-line Memory (OLM) is a periodic prior, the Working Memory (WM) is the live
tracker output restricted to the sensor footprint, and the Fused Memory (FM) combines
both cell by cell with a weighted Dempster-Shafer rule over the frame {crowded, not crowded}.
"""

import bisect
import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np

from .gridmap import (
    GridSpec,
    MixtureModel,
    ProbabilityGrid,
    cell_centers,
    grid_from_values,
    rasterize_normalize,
)

_CLOSURE_TOL = 1e-12
_VACUOUS_EPS = 1e-15


class VacuousFusionError(ValueError):
    pass


class LayerKind(str, Enum):
    WM = "WM"
    OLM = "OLM"
    FM = "FM"
    PUM = "PUM"


@dataclass(frozen=True, eq=False)
class MemoryLayer:
    grid: ProbabilityGrid
    footprint: np.ndarray
    kind: LayerKind

    def __post_init__(self):
        n = self.grid.spec.resolution
        footprint = np.array(self.footprint, dtype=bool)
        if footprint.shape != (n, n):
            raise ValueError(f"footprint must have shape {(n, n)}, got {footprint.shape}")
        if self.kind == LayerKind.OLM and not footprint.all():
            raise ValueError("OLM footprint must cover every cell")
        footprint.flags.writeable = False
        object.__setattr__(self, "footprint", footprint)
        object.__setattr__(self, "kind", LayerKind(self.kind))

    @property
    def spec(self) -> GridSpec:
        return self.grid.spec

    @property
    def is_empty(self) -> bool:
        return not self.footprint.any()


@dataclass(frozen=True, eq=False)
class MassAssignment:
    """Per-cell (m(C), m(NC)); fields hold floats or equally shaped arrays."""

    crowded: np.ndarray | float
    not_crowded: np.ndarray | float

    def __post_init__(self):
        c = np.asarray(self.crowded, dtype=np.float64)
        nc = np.asarray(self.not_crowded, dtype=np.float64)
        if c.shape != nc.shape:
            raise ValueError(f"mass shapes differ: {c.shape} vs {nc.shape}")
        if np.any(c < -_CLOSURE_TOL) or np.any(nc < -_CLOSURE_TOL) or np.any(c > 1 + _CLOSURE_TOL):
            raise ValueError("masses must lie in [0, 1]")
        if np.any(np.abs(c + nc - 1.0) > _CLOSURE_TOL):
            raise ValueError("masses must sum to 1")
        if c.ndim == 0:
            object.__setattr__(self, "crowded", float(c))
            object.__setattr__(self, "not_crowded", float(nc))


@dataclass(frozen=True)
class FusionConfig:
    gamma: float = 20.0
    clamp_policy: str = "clamp-renormalize"

    def __post_init__(self):
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.clamp_policy != "clamp-renormalize":
            raise ValueError(f"unsupported clamp policy {self.clamp_policy!r}")


@dataclass(frozen=True, eq=False)
class PeriodicOlmModel:
    """Time-of-cycle bins, each holding the crowd mixture expected from its start until the next bin."""

    cycle_length: float
    bins: tuple[tuple[float, MixtureModel], ...]

    def __post_init__(self):
        if not self.cycle_length > 0:
            raise ValueError(f"cycle length must be > 0, got {self.cycle_length}")
        bins = tuple(sorted(((float(s), m) for s, m in self.bins), key=lambda b: b[0]))
        for start, _ in bins:
            if not 0.0 <= start < self.cycle_length:
                raise ValueError(f"bin start {start} outside [0, {self.cycle_length})")
        object.__setattr__(self, "bins", bins)

    @property
    def starts(self) -> list[float]:
        return [s for s, _ in self.bins]

    def bin_index(self, t: float) -> int:
        tau = math.fmod(t, self.cycle_length)
        if tau < 0:
            tau += self.cycle_length
        idx = bisect.bisect_right(self.starts, tau) - 1
        if idx < 0 or self.bins[idx][1].is_empty:
            raise ValueError(f"no prior for time t={t}")
        return idx


@lru_cache(maxsize=64)
def _rasterized_bin(model: PeriodicOlmModel, index: int, spec: GridSpec) -> ProbabilityGrid:
    return rasterize_normalize(model.bins[index][1], spec)


def olm_predict(model: PeriodicOlmModel, t: float, spec: GridSpec) -> MemoryLayer:
    grid = _rasterized_bin(model, model.bin_index(t), spec)
    return MemoryLayer(grid, np.ones((spec.resolution,) * 2, dtype=bool), LayerKind.OLM)


def fov_footprint(spec: GridSpec, robot_pose, fov_radius: float) -> np.ndarray:
    d = np.linalg.norm(cell_centers(spec) - np.asarray(robot_pose, dtype=np.float64)[:2], axis=-1)
    return d <= fov_radius


def working_memory_layer(model: MixtureModel, spec: GridSpec, robot_pose, fov_radius: float) -> MemoryLayer | None:
    if model is None or model.is_empty:
        return None
    footprint = fov_footprint(spec, robot_pose, fov_radius)
    if not footprint.any():
        return None
    return MemoryLayer(rasterize_normalize(model, spec), footprint, LayerKind.WM)


def bpa_from_layer(layer: MemoryLayer) -> MassAssignment:
    values = np.array(layer.grid.values)
    return MassAssignment(values, 1.0 - values)


def sensor_weight(sigma_bar: float, config: FusionConfig) -> tuple[float, float]:
    if not sigma_bar >= 0:
        raise ValueError(f"sigma_bar must be >= 0, got {sigma_bar}")
    w_s = (math.exp(-config.gamma * sigma_bar) + 1.0) / 2.0
    return w_s, 1.0 - w_s


def balance_masses(m_s: MassAssignment, m_f: MassAssignment, w_s: float) -> tuple[MassAssignment, MassAssignment]:
    # w_s reaches 0.5 exactly once exp(-gamma * sigma_bar) underflows
    if not 0.5 <= w_s <= 1.0:
        raise ValueError(f"w_s must lie in [0.5, 1], got {w_s}")
    f_c = np.asarray(m_f.crowded, dtype=np.float64)
    f_nc = np.asarray(m_f.not_crowded, dtype=np.float64)
    # 2 * mean - m_f, written so that agreeing sources pass through untouched
    raw_c = f_c + 2.0 * w_s * (np.asarray(m_s.crowded) - f_c)
    raw_nc = f_nc + 2.0 * w_s * (np.asarray(m_s.not_crowded) - f_nc)
    clamp_c = np.clip(raw_c, 0.0, 1.0)
    clamp_nc = np.clip(raw_nc, 0.0, 1.0)
    clamped = (clamp_c != raw_c) | (clamp_nc != raw_nc)
    total = clamp_c + clamp_nc
    crowded = np.where(clamped, clamp_c / np.where(clamped, total, 1.0), raw_c)
    not_crowded = np.where(clamped, 1.0 - crowded, raw_nc)
    return m_s, MassAssignment(crowded, not_crowded)


def _combine(m_s: MassAssignment, m_f: MassAssignment) -> tuple[np.ndarray, np.ndarray]:
    s_c, s_nc = np.asarray(m_s.crowded), np.asarray(m_s.not_crowded)
    f_c, f_nc = np.asarray(m_f.crowded), np.asarray(m_f.not_crowded)
    conflict = s_c * f_nc + s_nc * f_c
    denom = 1.0 - conflict
    vacuous = denom <= _VACUOUS_EPS
    crowded = np.where(vacuous, 0.0, s_c * f_c / np.where(vacuous, 1.0, denom))
    return crowded, vacuous


def ds_combine(m_s: MassAssignment, m_f: MassAssignment) -> MassAssignment:
    crowded, vacuous = _combine(m_s, m_f)
    if np.any(vacuous):
        raise VacuousFusionError(f"vacuous fusion: total conflict in {int(np.sum(vacuous))} cell(s)")
    return MassAssignment(crowded, 1.0 - crowded)


def fused_belief(
    wm: MemoryLayer | None, olm: MemoryLayer, sigma_bar: float | None, config: FusionConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell m'(C) before renormalization, plus the mask of total-conflict cells."""
    if wm is not None and wm.spec != olm.spec:
        raise ValueError(f"grid spec mismatch: WM {wm.spec} vs OLM {olm.spec}")
    belief = np.array(olm.grid.values)
    vacuous_mask = np.zeros(belief.shape, dtype=bool)
    if wm is None or wm.is_empty:
        return belief, vacuous_mask
    if sigma_bar is None:
        raise ValueError("sigma_bar is required when the working memory is not empty")

    w_s, _ = sensor_weight(sigma_bar, config)
    mask = wm.footprint
    s = wm.grid.values[mask]
    f = olm.grid.values[mask]
    m_s, m_f = balance_masses(MassAssignment(s, 1.0 - s), MassAssignment(f, 1.0 - f), w_s)
    crowded, vacuous = _combine(m_s, m_f)
    if np.any(vacuous):
        logging.warning(f"{int(vacuous.sum())} cell(s) in total conflict, falling back to WM belief")
        crowded = np.where(vacuous, s, crowded)
    belief[mask] = crowded
    vacuous_mask[mask] = vacuous
    return belief, vacuous_mask


def fuse_layers(
    wm: MemoryLayer | None, olm: MemoryLayer, sigma_bar: float | None, config: FusionConfig = FusionConfig()
) -> MemoryLayer:
    if wm is None or wm.is_empty:
        if wm is not None and wm.spec != olm.spec:
            raise ValueError(f"grid spec mismatch: WM {wm.spec} vs OLM {olm.spec}")
        return MemoryLayer(olm.grid, np.zeros_like(olm.footprint), LayerKind.FM)
    belief, _ = fused_belief(wm, olm, sigma_bar, config)
    try:
        grid = grid_from_values(olm.spec, belief)
    except ValueError:
        logging.warning("fused belief vanished everywhere, keeping the OLM grid")
        grid = olm.grid
    return MemoryLayer(grid, wm.footprint, LayerKind.FM)


def fit_periodic_olm(
    snapshots,
    cycle_length: float,
    bin_width: float,
    bandwidth: float = 0.5,
    max_components: int = 400,
) -> PeriodicOlmModel:
    """Average snapshot KDEs per time-of-cycle bin.

    `snapshots` yields (t, positions) pairs. Every snapshot in a bin contributes equal
    total weight; positions are merged on a lattice so a bin holds at most
    `max_components` components.
    """
    if not 0 < bin_width <= cycle_length:
        raise ValueError(f"bin width must lie in (0, {cycle_length}], got {bin_width}")
    n_bins = int(math.ceil(cycle_length / bin_width - 1e-9))
    per_bin: list[list[np.ndarray]] = [[] for _ in range(n_bins)]
    for t, positions in snapshots:
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        if len(positions) == 0:
            continue
        tau = math.fmod(t, cycle_length) % cycle_length
        per_bin[min(int(tau / bin_width), n_bins - 1)].append(positions)

    bins = []
    for b, snaps in enumerate(per_bin):
        if not snaps:
            logging.warning(f"OLM bin {b} has no observed agents")
            bins.append((b * bin_width, MixtureModel()))
            continue
        points = np.concatenate(snaps)
        weights = np.concatenate([np.full(len(s), 1.0 / (len(snaps) * len(s))) for s in snaps])
        points, weights = _merge_on_lattice(points, weights, bandwidth / 2.0, max_components)
        covs = np.broadcast_to(np.eye(2) * bandwidth**2, (len(points), 2, 2))
        bins.append((b * bin_width, MixtureModel.from_arrays(points, covs, weights / weights.sum())))
    return PeriodicOlmModel(float(cycle_length), tuple(bins))


def _merge_on_lattice(points: np.ndarray, weights: np.ndarray, spacing: float, max_components: int):
    while True:
        keys = np.floor(points / spacing).astype(np.int64)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        if len(uniq) <= max_components:
            break
        spacing *= 2.0
    merged_w = np.bincount(inverse, weights=weights, minlength=len(uniq))
    merged_x = np.bincount(inverse, weights=weights * points[:, 0], minlength=len(uniq)) / merged_w
    merged_y = np.bincount(inverse, weights=weights * points[:, 1], minlength=len(uniq)) / merged_w
    return np.stack([merged_x, merged_y], axis=-1), merged_w


def save_olm_schedule(model: PeriodicOlmModel, path: str) -> str:
    payload = {
        "cycle_length": model.cycle_length,
        "bins": [
            {
                "start": start,
                "components": [
                    {"mean": c.mean.tolist(), "covariance": c.covariance.tolist(), "weight": c.weight}
                    for c in mixture.components
                ],
            }
            for start, mixture in model.bins
        ],
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)
    return path


def load_olm_schedule(path: str) -> PeriodicOlmModel:
    with open(path) as f:
        payload = json.load(f)
    bins = []
    for entry in payload["bins"]:
        comps = entry["components"]
        if comps:
            weights = np.array([c["weight"] for c in comps], dtype=np.float64)
            mixture = MixtureModel.from_arrays(
                [c["mean"] for c in comps], [c["covariance"] for c in comps], weights / weights.sum()
            )
        else:
            mixture = MixtureModel()
        bins.append((float(entry["start"]), mixture))
    return PeriodicOlmModel(float(payload["cycle_length"]), tuple(bins))


@dataclass
class PartiallyUpdatedMemory:
    """Time-decaying anomaly overlay on the OLM.

    The last observed anomaly (WM mass exceeding the OLM inside the footprint, rescaled to
    the OLM mass it replaces) fades linearly back to the OLM over `horizon` seconds.
    """

    horizon: float = 40.0
    anomaly: np.ndarray | None = field(default=None, repr=False)
    updated_at: float | None = None

    def update(self, wm: MemoryLayer | None, olm: MemoryLayer, t: float) -> None:
        if wm is None or wm.is_empty:
            return
        excess = np.where(wm.footprint, np.clip(wm.grid.values - olm.grid.values, 0.0, None), 0.0)
        total = excess.sum()
        if total <= 0.0:
            return
        self.anomaly = excess * (olm.grid.values[wm.footprint].sum() / total)
        self.updated_at = t

    def fade(self, t: float) -> float:
        if self.updated_at is None:
            return 0.0
        return max(0.0, 1.0 - (t - self.updated_at) / self.horizon)

    def predict(self, olm: MemoryLayer, t: float) -> MemoryLayer:
        weight = self.fade(t)
        if weight <= 0.0 or self.anomaly is None:
            return MemoryLayer(olm.grid, np.zeros_like(olm.footprint), LayerKind.PUM)
        grid = grid_from_values(olm.spec, olm.grid.values + weight * self.anomaly)
        return MemoryLayer(grid, self.anomaly > 0, LayerKind.PUM)
