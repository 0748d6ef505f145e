"""Synthetic frame handles, extractor and tracker driven by hidden ground truth.

A ``SyntheticFrame`` carries the true camera pose; nothing downstream of the
extractor/tracker pair looks at it.  Every random draw is seeded from
``(seed, frame_id)`` so a frame renders identically however it is tiled or
how often it is revisited.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..descriptors import perturb_descriptors, random_descriptors
from ..geometry import CameraIntrinsics, Pose, project_points
from .extract import Detections, Rect

CLUTTER_ID = -1


@dataclass(frozen=True)
class SyntheticFrame:
    frame_id: int
    timestamp: float
    pose: Pose                 # hidden truth, world -> camera
    intrinsics: CameraIntrinsics

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height


def visible_mask(scene, pose: Pose, intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Points inside the frustum and inside their own visibility band. Returns (mask, uv)."""
    uv, depth = project_points(pose.R, pose.t, intrinsics, scene.points)
    dist = np.linalg.norm(scene.points - pose.center, axis=1)
    with np.errstate(invalid="ignore"):
        mask = (depth > 0.1) & intrinsics.contains(uv) & (dist >= scene.r_near) & (dist <= scene.r_far)
    return mask, uv


class SyntheticExtractor:
    """Projections of visible scene points with noisy descriptors, plus clutter."""

    radius = 0

    def __init__(self, scene, keypoint_noise: float = 0.5, descriptor_noise: float = 0.05,
                 clutter_fraction: float = 0.1, dropout: float = 0.0, seed: int = 0):
        if not 0 <= clutter_fraction <= 1:
            raise ValueError("clutter_fraction must be in [0, 1]")
        self.scene = scene
        self.keypoint_noise = keypoint_noise
        self.descriptor_noise = descriptor_noise
        self.clutter_fraction = clutter_fraction
        self.dropout = dropout
        self.seed = seed

    def _render(self, frame: SyntheticFrame) -> Detections:
        intr = frame.intrinsics
        rng = np.random.default_rng([self.seed, frame.frame_id])
        mask, uv = visible_mask(self.scene, frame.pose, intr)
        idx = np.flatnonzero(mask)
        if self.dropout > 0:
            idx = idx[rng.random(len(idx)) >= self.dropout]
        n_vis = 0 if self.clutter_fraction >= 1 else len(idx)
        idx = idx[:n_vis]
        kp = uv[idx] + rng.normal(0.0, self.keypoint_noise, (len(idx), 2)) if self.keypoint_noise > 0 else uv[idx]
        desc = perturb_descriptors(self.scene.descriptors[idx], self.descriptor_noise, rng)
        if self.clutter_fraction >= 1:
            n_clutter = max(1, len(np.flatnonzero(mask)))
        else:
            n_clutter = int(round(n_vis * self.clutter_fraction / (1.0 - self.clutter_fraction)))
        cuv = np.column_stack([rng.uniform(0, intr.width, n_clutter), rng.uniform(0, intr.height, n_clutter)])
        cdepth = rng.uniform(2.0, 12.0, n_clutter)
        xy = intr.normalize(cuv)
        cam = np.column_stack([xy * cdepth[:, None], cdepth])
        csrc = (cam - frame.pose.t) @ frame.pose.R
        cdesc = random_descriptors(n_clutter, rng, self.scene.descriptors.shape[1])
        all_uv = np.concatenate([kp, cuv])
        ok = intr.contains(all_uv)
        det = Detections(all_uv, rng.uniform(0.5, 1.0, len(all_uv)),
                         np.concatenate([desc, cdesc]),
                         np.concatenate([self.scene.points[idx], csrc]),
                         np.concatenate([idx.astype(np.int64), np.full(n_clutter, CLUTTER_ID, np.int64)]))
        return det.select(ok)

    def extract(self, frame: SyntheticFrame, segment: Rect | None = None) -> Detections:
        det = self._render(frame)
        if segment is not None:
            det = det.select(segment.contains(det.uv))
        return det


class SyntheticTracker:
    """Optical-flow stand-in: re-projects each tracked source with drift and random loss.

    A point is lost when it leaves the image, falls behind the camera, or with
    probability ``loss_prob`` per frame.  The offset between the tracked
    position and the true projection (initially the detection noise) performs
    a random walk with ``drift_px`` standard deviation per frame.
    """

    def __init__(self, loss_prob: float = 0.02, drift_px: float = 0.05, seed: int = 0):
        self.loss_prob = loss_prob
        self.drift_px = drift_px
        self.seed = seed

    @staticmethod
    def initial_drift(frame: SyntheticFrame, uv: np.ndarray, sources: np.ndarray) -> np.ndarray:
        proj, _ = project_points(frame.pose.R, frame.pose.t, frame.intrinsics, sources)
        return np.nan_to_num(np.asarray(uv, float) - proj)

    def track(self, prev: SyntheticFrame, nxt: SyntheticFrame, uv: np.ndarray, sources: np.ndarray,
              drift: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Returns ``(new_uv, tracked_mask, new_drift)``."""
        n = len(uv)
        if n == 0:
            return np.zeros((0, 2)), np.zeros(0, bool), np.zeros((0, 2))
        rng = np.random.default_rng([self.seed, 7919, prev.frame_id, nxt.frame_id])
        proj, depth = project_points(nxt.pose.R, nxt.pose.t, nxt.intrinsics, sources)
        drift = drift + rng.normal(0.0, self.drift_px, (n, 2))
        new = proj + drift
        with np.errstate(invalid="ignore"):
            ok = (depth > 0.1) & nxt.intrinsics.contains(new) & (rng.random(n) >= self.loss_prob)
        return new, ok, drift

    # point-tracker interface shared with LKTracker; aux = [source xyz, drift uv]
    def start(self, frame: SyntheticFrame, uv: np.ndarray, sources: np.ndarray) -> np.ndarray:
        sources = np.asarray(sources, float).reshape(-1, 3)
        return np.column_stack([sources, self.initial_drift(frame, uv, sources)])

    def step(self, prev: SyntheticFrame, nxt: SyntheticFrame, uv: np.ndarray, aux: np.ndarray):
        new, ok, drift = self.track(prev, nxt, uv, aux[:, :3], aux[:, 3:5])
        return new, ok, np.column_stack([aux[:, :3], drift])
