import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .gridmap import GridSpec, MixtureModel

# position-only observation of the [x, y, vx, vy] state
H = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])


class FilterDivergenceError(RuntimeError):
    pass


class Measurement(NamedTuple):
    agent_id: int
    position: np.ndarray


def _matrix(value, shape: tuple[int, int], name: str) -> np.ndarray:
    out = np.array(value, dtype=np.float64)
    if out.shape != shape or not np.all(np.isfinite(out)):
        raise ValueError(f"{name} must be a finite {shape} matrix")
    if not np.allclose(out, out.T, rtol=0.0, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    out.flags.writeable = False
    return out


def _is_spd(matrix: np.ndarray) -> bool:
    try:
        np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        return False
    return True


@dataclass(frozen=True, eq=False)
class TrackState:
    position: np.ndarray
    velocity: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        for name, size in (("position", 2), ("velocity", 2)):
            vec = np.array(getattr(self, name), dtype=np.float64)
            if vec.shape != (size,) or not np.all(np.isfinite(vec)):
                raise ValueError(f"{name} must be a finite 2-vector")
            vec.flags.writeable = False
            object.__setattr__(self, name, vec)
        object.__setattr__(self, "covariance", _matrix(self.covariance, (4, 4), "track covariance"))

    @property
    def state(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    @property
    def position_covariance(self) -> np.ndarray:
        return self.covariance[:2, :2]


@dataclass(frozen=True, eq=False)
class SensorModel:
    measurement_noise: np.ndarray
    process_noise: np.ndarray
    fov_radius: float
    dt: float

    def __post_init__(self):
        if not self.fov_radius > 0:
            raise ValueError(f"fov_radius must be > 0, got {self.fov_radius}")
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        r = _matrix(self.measurement_noise, (2, 2), "measurement_noise")
        q = _matrix(self.process_noise, (4, 4), "process_noise")
        for name, m in (("measurement_noise", r), ("process_noise", q)):
            if np.linalg.eigvalsh(m).min() < -1e-12:
                raise ValueError(f"{name} must be positive semi-definite")
        object.__setattr__(self, "measurement_noise", r)
        object.__setattr__(self, "process_noise", q)

    @classmethod
    def isotropic(cls, sigma_r: float, accel_noise: float, fov_radius: float, dt: float) -> "SensorModel":
        """R = sigma_r^2 I and continuous white-noise-acceleration Q with spectral density accel_noise."""
        block = accel_noise * np.array([[dt**3 / 3.0, dt**2 / 2.0], [dt**2 / 2.0, dt]])
        q = np.zeros((4, 4))
        for axis in (0, 1):
            idx = np.ix_([axis, axis + 2], [axis, axis + 2])
            q[idx] = block
        return cls(np.eye(2) * sigma_r**2, q, fov_radius, dt)


def transition(dt: float) -> np.ndarray:
    a = np.eye(4)
    a[0, 2] = a[1, 3] = dt
    return a


def init_track(measurement, sensor: SensorModel, initial_velocity_variance: float = 1.0) -> TrackState:
    cov = np.zeros((4, 4))
    cov[:2, :2] = sensor.measurement_noise
    cov[2:, 2:] = np.eye(2) * initial_velocity_variance
    if not _is_spd(cov):
        # a noiseless sensor still needs a proper prior on position
        cov[:2, :2] += np.eye(2) * 1e-9
    return TrackState(np.asarray(measurement, dtype=np.float64), np.zeros(2), cov)


def kf_step(track: TrackState, measurement, sensor: SensorModel) -> TrackState:
    z = np.asarray(measurement, dtype=np.float64)
    if z.shape != (2,) or not np.all(np.isfinite(z)):
        raise ValueError(f"measurement must be a finite 2-vector, got {measurement!r}")

    a = transition(sensor.dt)
    x_pred = a @ track.state
    p_pred = a @ track.covariance @ a.T + sensor.process_noise

    r = sensor.measurement_noise
    s = H @ p_pred @ H.T + r
    gain = np.linalg.solve(s, H @ p_pred).T
    x = x_pred + gain @ (z - H @ x_pred)
    i_kh = np.eye(4) - gain @ H
    # Joseph form
    p = i_kh @ p_pred @ i_kh.T + gain @ r @ gain.T
    p = 0.5 * (p + p.T)
    if not (np.all(np.isfinite(p)) and _is_spd(p)):
        raise FilterDivergenceError(f"filter divergence: posterior covariance not SPD (trace {np.trace(p)!r})")
    return TrackState(x[:2], x[2:], p)


def build_working_memory(tracks: list[TrackState], spec: GridSpec) -> tuple[MixtureModel, float | None]:
    """One component per track inside the grid; Σ̄ is the mean half-trace of the position covariances.

    Returns an empty model and None when no track lies on the map.
    """
    kept = [t for t in tracks if spec.contains(t.position)]
    if len(kept) < len(tracks):
        logging.debug(f"dropped {len(tracks) - len(kept)} tracks outside the grid extent")
    if not kept:
        return MixtureModel(), None
    means = np.stack([t.position for t in kept])
    covs = np.stack([t.position_covariance for t in kept])
    weights = np.full(len(kept), 1.0 / len(kept))
    sigma_bar = float(np.mean([np.trace(c) / 2.0 for c in covs]))
    return MixtureModel.from_arrays(means, covs, weights), sigma_bar


@dataclass
class TrackBank:
    """Tracks keyed by agent id: born on FOV entry, dropped on FOV exit."""

    sensor: SensorModel
    initial_velocity_variance: float = 1.0
    tracks: dict[int, TrackState] = field(default_factory=dict)

    def update(self, measurements: list[Measurement]) -> list[TrackState]:
        updated = {}
        for m in measurements:
            previous = self.tracks.get(m.agent_id)
            if previous is None:
                updated[m.agent_id] = init_track(m.position, self.sensor, self.initial_velocity_variance)
            else:
                updated[m.agent_id] = kf_step(previous, m.position, self.sensor)
        self.tracks = updated
        return [self.tracks[k] for k in sorted(self.tracks)]
