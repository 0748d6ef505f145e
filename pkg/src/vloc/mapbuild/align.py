"""Metric alignment of a reconstruction from annotated control points."""
from __future__ import annotations

import csv

import numpy as np

from ..geometry import SimilarityTransform, umeyama_align
from .model import MapPoint, Model3D


def apply_similarity(model: Model3D, sim: SimilarityTransform) -> Model3D:
    """Move points, poses and named locations into the target frame; descriptors and index are untouched."""
    pts = [MapPoint(p.point_id, sim.apply(p.position[None, :])[0], list(p.observations), p.descriptors)
           for p in model.points]
    poses = {k: sim.apply_to_pose(v) for k, v in model.frame_poses.items()}
    locs = [(label, sim.apply(np.asarray(p, float)[None, :])[0]) for label, p in model.named_locations]
    prev = model.alignment
    total = sim if prev is None else SimilarityTransform.from_matrix(
        sim.scale * prev.scale, sim.R @ prev.R, sim.apply(prev.t[None, :])[0])
    return model.replace(points=pts, frame_poses=poses, named_locations=locs, alignment=total,
                         index=model.index, descriptor_matrix=model.descriptor_matrix,
                         descriptor_to_point=model.descriptor_to_point)


def align_model(model: Model3D, model_xyz, world_xyz) -> tuple[Model3D, np.ndarray]:
    """Fit a similarity from >= 3 control points and apply it. Returns the model and per-point residuals."""
    sim, residuals = umeyama_align(np.asarray(model_xyz, float), np.asarray(world_xyz, float))
    return apply_similarity(model, sim), residuals


def read_control_points(path) -> tuple[np.ndarray, np.ndarray]:
    """CSV with columns ``model_x,model_y,model_z,world_x,world_y,world_z``."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append([float(row[k]) for k in ("model_x", "model_y", "model_z", "world_x", "world_y", "world_z")])
    a = np.array(rows, dtype=float).reshape(-1, 6)
    return a[:, :3], a[:, 3:]


def write_control_points(path, model_xyz, world_xyz) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_x", "model_y", "model_z", "world_x", "world_y", "world_z"])
        for m, g in zip(np.asarray(model_xyz, float), np.asarray(world_xyz, float)):
            w.writerow([repr(float(v)) for v in (*m, *g)])
