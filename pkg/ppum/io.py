import json
import logging
import os

import numpy as np
from PIL import Image
from safetensors import safe_open
from safetensors.numpy import save_file

from .gridmap import GridSpec, ProbabilityGrid


def _header(spec: GridSpec) -> dict:
    return {"side_length": spec.side_length, "resolution": spec.resolution, "origin": list(spec.origin)}


def _spec_from_header(header: dict) -> GridSpec:
    try:
        return GridSpec(float(header["side_length"]), int(header["resolution"]), tuple(header["origin"]))
    except KeyError as e:
        raise ValueError(f"grid header is missing field {e}") from e


def save_grid(grid: ProbabilityGrid, path: str) -> str:
    """Write a grid as `.safetensors` (binary) or `.json` depending on the suffix."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if path.endswith(".safetensors"):
        metadata = {k: json.dumps(v) for k, v in _header(grid.spec).items()}
        save_file({"values": np.ascontiguousarray(grid.values)}, path, metadata=metadata)
    elif path.endswith(".json"):
        payload = dict(_header(grid.spec), values=grid.values.reshape(-1).tolist())
        with open(path, "w") as f:
            json.dump(payload, f)
    else:
        raise ValueError(f"unsupported grid format: {path}")
    return path


def load_grid(path: str) -> ProbabilityGrid:
    if path.endswith(".safetensors"):
        with safe_open(path, framework="numpy") as f:
            header = {k: json.loads(v) for k, v in (f.metadata() or {}).items()}
            values = f.get_tensor("values")
        return ProbabilityGrid(_spec_from_header(header), values)
    if path.endswith(".json"):
        with open(path) as f:
            payload = json.load(f)
        spec = _spec_from_header(payload)
        n = spec.resolution
        return ProbabilityGrid(spec, np.asarray(payload["values"], dtype=np.float64).reshape(n, n))
    raise ValueError(f"unsupported grid format: {path}")


def heatmap_bytes(grid: ProbabilityGrid) -> np.ndarray:
    """8-bit image scaled by the max cell, flipped so north is up."""
    peak = grid.values.max()
    scaled = grid.values / peak if peak > 0 else grid.values
    return np.ascontiguousarray(np.flipud(np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)))


def export_pgm(grid: ProbabilityGrid, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    Image.fromarray(heatmap_bytes(grid)).save(path, format="PPM")
    return path


def export_png(grid: ProbabilityGrid, path: str) -> bool:
    """Colour heatmap via OpenCV; returns False when OpenCV is not installed."""
    try:
        import cv2
    except ImportError:
        logging.warning(f"opencv-python not installed, skipping colour heatmap {path}")
        return False
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return bool(cv2.imwrite(path, cv2.applyColorMap(heatmap_bytes(grid), cv2.COLORMAP_JET)))
