"""Model compression: prune short-lived points and collapse descriptors to their mean."""
from __future__ import annotations

import numpy as np

from ..errors import EmptyModelError
from .model import MapPoint, Model3D


def compress_points(model: Model3D, min_frames: int = 10) -> Model3D:
    """Keep only points observed in at least ``min_frames`` distinct frames."""
    kept = [p for p in model.points if p.frame_count >= min_frames]
    if not kept:
        raise EmptyModelError(f"no point is observed in {min_frames} or more frames")
    if len(kept) == len(model.points):
        return model.replace()
    return model.replace(points=kept)


def mean_descriptor(descriptors: np.ndarray) -> np.ndarray:
    m = np.asarray(descriptors, dtype=np.float64).mean(axis=0)
    n = np.linalg.norm(m)
    return (m / n if n > 0 else m).astype(np.float32)


def compress_descriptors(model: Model3D) -> Model3D:
    """Replace each point's descriptors by their renormalized mean."""
    pts = [MapPoint(p.point_id, p.position, list(p.observations), mean_descriptor(p.descriptors)[None, :])
           for p in model.points]
    return model.replace(points=pts)
