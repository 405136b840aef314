import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from einops import rearrange
from torch.distributions import MultivariateNormal

UNDERFLOW_FLOOR = 1e-300
# points x components evaluated per torch call
_CHUNK_ELEMENTS = 4_000_000


def _frozen(array, shape: tuple[int, ...], name: str) -> np.ndarray:
    out = np.array(array, dtype=np.float64)
    if out.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} must be finite, got {out.tolist()}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    mean: np.ndarray
    covariance: np.ndarray
    weight: float

    def __post_init__(self):
        mean = _frozen(self.mean, (2,), "mean")
        cov = _frozen(self.covariance, (2, 2), "covariance")
        if not np.isclose(cov[0, 1], cov[1, 0], rtol=0.0, atol=1e-12):
            raise ValueError(f"covariance must be symmetric, got {cov.tolist()}")
        if not (math.isfinite(self.weight) and self.weight >= 0.0):
            raise ValueError(f"component weight must be >= 0, got {self.weight}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "weight", float(self.weight))


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """Weighted set of bivariate Gaussians describing a crowd density layer."""

    components: tuple[GaussianComponent, ...] = ()

    def __post_init__(self):
        components = tuple(self.components)
        object.__setattr__(self, "components", components)
        if components:
            total = sum(c.weight for c in components)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"mixture weights must sum to 1, got {total!r}")

    def __len__(self) -> int:
        return len(self.components)

    @property
    def is_empty(self) -> bool:
        return not self.components

    @property
    def means(self) -> np.ndarray:
        return np.array([c.mean for c in self.components], dtype=np.float64).reshape(-1, 2)

    @property
    def covariances(self) -> np.ndarray:
        return np.array([c.covariance for c in self.components], dtype=np.float64).reshape(-1, 2, 2)

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components], dtype=np.float64)

    @classmethod
    def from_arrays(cls, means, covariances, weights) -> "MixtureModel":
        means = np.asarray(means, dtype=np.float64).reshape(-1, 2)
        covariances = np.asarray(covariances, dtype=np.float64).reshape(-1, 2, 2)
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if not (len(means) == len(covariances) == len(weights)):
            raise ValueError(
                f"component arrays disagree: {len(means)} means, {len(covariances)} covariances, {len(weights)} weights"
            )
        return cls(tuple(GaussianComponent(m, c, float(w)) for m, c, w in zip(means, covariances, weights)))


@dataclass(frozen=True)
class GridSpec:
    side_length: float
    resolution: int
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (math.isfinite(self.side_length) and self.side_length > 0):
            raise ValueError(f"side_length must be > 0, got {self.side_length}")
        if int(self.resolution) != self.resolution or self.resolution < 2:
            raise ValueError(f"resolution must be an integer >= 2, got {self.resolution}")
        object.__setattr__(self, "side_length", float(self.side_length))
        object.__setattr__(self, "resolution", int(self.resolution))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def from_cell_size(cls, side_length: float, cell_size: float = 0.25, origin=(0.0, 0.0)) -> "GridSpec":
        return cls(side_length, max(2, int(round(side_length / cell_size))), tuple(origin))

    @property
    def cell_size(self) -> float:
        return self.side_length / self.resolution

    @property
    def cell_area(self) -> float:
        return self.cell_size**2

    def contains(self, point) -> bool:
        x, y = float(point[0]), float(point[1])
        x0, y0 = self.origin
        return x0 <= x <= x0 + self.side_length and y0 <= y <= y0 + self.side_length


@dataclass(frozen=True, eq=False)
class ProbabilityGrid:
    """values[row, col]: row follows y, col follows x, row 0 at the southern edge."""

    spec: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = self.spec.resolution
        values = _frozen(self.values, (n, n), "grid values")
        if values.min() < 0.0:
            raise ValueError(f"grid values must be >= 0, got min {values.min()}")
        total = values.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"grid values must sum to 1, got {total!r}")
        object.__setattr__(self, "values", values)


def cell_centers(spec: GridSpec) -> np.ndarray:
    h = spec.cell_size
    x0, y0 = spec.origin
    offsets = (np.arange(spec.resolution, dtype=np.float64) + 0.5) * h
    ys, xs = np.meshgrid(y0 + offsets, x0 + offsets, indexing="ij")
    return np.stack([xs, ys], axis=-1)


def cell_index(spec: GridSpec, point) -> tuple[int, int]:
    if not spec.contains(point):
        raise ValueError(f"out of bounds: point {tuple(map(float, point))} outside grid extent")
    h = spec.cell_size
    col = min(int((float(point[0]) - spec.origin[0]) / h), spec.resolution - 1)
    row = min(int((float(point[1]) - spec.origin[1]) / h), spec.resolution - 1)
    return row, col


def _mixture_log_density(model: MixtureModel, points: np.ndarray) -> np.ndarray:
    """log p(x|model) at each of the (m, 2) points."""
    covs = torch.as_tensor(model.covariances, dtype=torch.float64)
    scale_tril, info = torch.linalg.cholesky_ex(covs)
    if bool((info != 0).any()):
        bad = int(torch.nonzero(info)[0, 0])
        raise ValueError(f"degenerate component {bad}: covariance {model.covariances[bad].tolist()} is not positive-definite")
    dist = MultivariateNormal(
        torch.as_tensor(model.means, dtype=torch.float64), scale_tril=scale_tril, validate_args=False
    )
    with np.errstate(divide="ignore"):
        log_w = torch.as_tensor(np.log(model.weights), dtype=torch.float64)

    pts = torch.as_tensor(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    chunk = max(1, _CHUNK_ELEMENTS // len(model))
    out = []
    for batch in torch.split(pts, chunk):
        log_prob = dist.log_prob(rearrange(batch, "m d -> m 1 d")) + log_w
        out.append(torch.logsumexp(log_prob, dim=-1))
    return torch.cat(out).numpy()


def evaluate_density(model: MixtureModel, point) -> float:
    if model.is_empty:
        raise ValueError("cannot evaluate an empty mixture")
    point = np.asarray(point, dtype=np.float64)
    if point.shape != (2,) or not np.all(np.isfinite(point)):
        raise ValueError(f"point must be a finite 2-vector, got {point!r}")
    return float(np.exp(_mixture_log_density(model, point[None])[0]))


def grid_from_values(spec: GridSpec, raw) -> ProbabilityGrid:
    """Normalize an arbitrary nonnegative n x n field into a probability grid."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape != (spec.resolution, spec.resolution):
        raise ValueError(f"raw field must have shape {(spec.resolution,) * 2}, got {raw.shape}")
    if not np.all(np.isfinite(raw)) or raw.min() < 0.0:
        raise ValueError("raw field must be finite and nonnegative")
    peak = raw.max()
    if peak < UNDERFLOW_FLOOR:
        raise ValueError(f"empty raster: peak density {peak!r} below underflow floor")
    scaled = raw / peak
    return ProbabilityGrid(spec, scaled / scaled.sum())


def rasterize_normalize(model: MixtureModel, spec: GridSpec) -> ProbabilityGrid:
    if model.is_empty:
        raise ValueError("cannot rasterize an empty mixture")
    n = spec.resolution
    centers = rearrange(cell_centers(spec), "h w c -> (h w) c")
    log_density = _mixture_log_density(model, centers)
    peak = float(log_density.max())
    if not math.isfinite(peak) or peak < math.log(UNDERFLOW_FLOOR):
        raise ValueError(f"empty raster: all {n * n} cell densities below {UNDERFLOW_FLOOR}")
    # subtracting the peak log-density keeps far-field mixtures from underflowing
    scaled = np.exp(log_density - peak)
    return ProbabilityGrid(spec, rearrange(scaled / scaled.sum(), "(h w) -> h w", h=n))


def probability_at(grid: ProbabilityGrid, point) -> float:
    row, col = cell_index(grid.spec, point)
    return float(grid.values[row, col])


def grid_rmse(a: ProbabilityGrid, b: ProbabilityGrid) -> float:
    if a.spec != b.spec:
        raise ValueError(f"grid spec mismatch: {a.spec} vs {b.spec}")
    return float(np.sqrt(np.mean((a.values - b.values) ** 2)))


def uniform_grid(spec: GridSpec) -> ProbabilityGrid:
    n = spec.resolution
    return ProbabilityGrid(spec, np.full((n, n), 1.0 / (n * n)))


def isotropic_mixture(points, sigma: float, weights=None) -> MixtureModel:
    """One component per point, covariance sigma^2 I, equal weights unless given."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(points) == 0:
        return MixtureModel()
    if weights is None:
        weights = np.full(len(points), 1.0 / len(points))
    else:
        weights = np.asarray(weights, dtype=np.float64)
        weights = weights / weights.sum()
    covs = np.broadcast_to(np.eye(2) * sigma**2, (len(points), 2, 2))
    logging.debug(f"isotropic mixture with {len(points)} components, sigma={sigma}")
    return MixtureModel.from_arrays(points, covs, weights)
