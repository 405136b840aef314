import numpy as np


def as_points(points) -> np.ndarray:
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)


def polyline_length(path) -> float:
    path = as_points(path)
    if len(path) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(path, axis=0), axis=-1).sum())


def segment_distance(points, a, b) -> np.ndarray:
    """Euclidean distance from each point to the closed segment [a, b]."""
    points = as_points(points)
    a = np.asarray(a, dtype=np.float64)
    d = np.asarray(b, dtype=np.float64) - a
    denom = float(d @ d)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=-1)
    t = np.clip((points - a) @ d / denom, 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * d), axis=-1)


def polyline_distance(points, path) -> np.ndarray:
    path = as_points(path)
    if len(path) < 2:
        raise ValueError(f"path needs at least 2 points, got {len(path)}")
    points = as_points(points)
    out = np.full(len(points), np.inf)
    for a, b in zip(path[:-1], path[1:]):
        out = np.minimum(out, segment_distance(points, a, b))
    return out


def sample_polyline(path, step: float) -> np.ndarray:
    """Points every `step` metres along each segment, endpoints included."""
    path = as_points(path)
    samples = [path[:1]]
    for a, b in zip(path[:-1], path[1:]):
        length = float(np.linalg.norm(b - a))
        k = max(1, int(np.ceil(length / step)))
        t = np.arange(1, k + 1, dtype=np.float64)[:, None] / k
        samples.append(a + t * (b - a))
    return np.concatenate(samples)
