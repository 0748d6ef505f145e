"""2D-3D correspondences between frame keypoints and model points."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..descriptors import ann_knn_rows
from ..geometry import Pose, project_points
from ..mapbuild.model import Model3D
from .ransac import RansacConfig


@dataclass
class Correspondence:
    keypoint_uv: np.ndarray
    point_id: int
    position: np.ndarray
    descriptor_distance: float          # squared L2
    projection_error: float | None = None
    keypoint_index: int = -1


def match_to_model(descriptors, model: Model3D, ratio_threshold: float = 0.7, k: int = 8,
                   checks: int | None = None):
    """Nearest model point per descriptor with a ratio test against the nearest *other* point.

    Uncompressed models store several descriptors per point, so the runner-up
    must come from a different point.  Returns ``(keypoint idx, point ids, sq distances)``.
    """
    desc = np.asarray(descriptors, dtype=np.float32)
    if model.index is None or len(desc) == 0:
        z = np.zeros(0, np.int64)
        return z, z, np.zeros(0)
    checks = model.index.checks if checks is None else checks
    thr2 = ratio_threshold ** 2
    kp_i, pid, dist = [], [], []
    owner = model.descriptor_to_point
    for i, q in enumerate(desc):
        rows, d2 = ann_knn_rows(model.index, q, k, checks)
        pts = owner[rows]
        other = np.flatnonzero(pts != pts[0])
        if len(other):
            second = d2[other[0]]
            if not (second > 0 and d2[0] < thr2 * second):
                continue
        kp_i.append(i)
        pid.append(int(pts[0]))
        dist.append(float(d2[0]))
    return np.array(kp_i, np.int64), np.array(pid, np.int64), np.array(dist)


def make_correspondences(keypoints, descriptors, model: Model3D, predicted_pose: Pose | None = None,
                         config: RansacConfig | None = None, ratio_threshold: float = 0.7,
                         k: int = 8, intrinsics=None) -> list[Correspondence]:
    """Ratio-tested matches, gated by projection error under the prediction, best ``top_k`` by distance.

    ``intrinsics`` is the query camera; defaults to the survey camera stored in the model.
    """
    config = config or RansacConfig()
    intrinsics = intrinsics or model.intrinsics
    uv = np.asarray(keypoints, dtype=float).reshape(-1, 2)
    kp_i, pid, dist = match_to_model(descriptors, model, ratio_threshold, k)
    if not len(kp_i):
        return []
    pos = model.position_of(pid)
    perr = None
    if predicted_pose is not None:
        proj, depth = project_points(predicted_pose.R, predicted_pose.t, intrinsics, pos)
        perr = np.sqrt(((proj - uv[kp_i]) ** 2).sum(1))
        perr[~(depth > 0)] = np.inf
        keep = perr <= config.projection_gate
        kp_i, pid, dist, pos, perr = kp_i[keep], pid[keep], dist[keep], pos[keep], perr[keep]
    order = np.lexsort((kp_i, dist))[:config.top_k]
    return [Correspondence(uv[kp_i[j]].copy(), int(pid[j]), pos[j].copy(), float(dist[j]),
                           None if perr is None else float(perr[j]), int(kp_i[j])) for j in order]
