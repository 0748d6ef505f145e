"""Synthetic corridor worlds, walking trajectories and survey rendering.

World frame: x to the right of the corridor, y down, z along the corridor.
A camera looking straight down the corridor therefore has identity rotation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..descriptors import DESCRIPTOR_DIM, random_descriptors
from ..geometry import CameraIntrinsics, Pose
from ..mapbuild.model import SurveyFrame
from ..tracker.synthetic import SyntheticExtractor, SyntheticFrame
from .truth import GroundTruth, MARK_SPACING_M

DEFAULT_INTRINSICS = CameraIntrinsics(400.0, 400.0, 320.0, 240.0, 640, 480)


@dataclass
class SceneSpec:
    length: float = 100.0          # corridor length (m)
    width: float = 4.0
    height: float = 3.0
    overhang: float = 12.0         # points continue past both ends
    density: float = 5.0           # points per square metre of wall/floor/ceiling
    ambiguity_fraction: float = 0.0
    cluster_size: int = 4
    descriptor_dim: int = DESCRIPTOR_DIM
    sparsity: float = 0.5
    # per-point visibility band [r_far - span, r_far] in metres from the camera
    short_fraction: float = 0.68
    short_span: tuple[float, float] = (0.6, 1.3)
    long_span: tuple[float, float] = (4.0, 10.0)
    far_range: tuple[float, float] = (5.0, 13.0)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    seed: int
    points: np.ndarray         # (N, 3)
    descriptors: np.ndarray    # (N, D) base descriptors
    r_near: np.ndarray
    r_far: np.ndarray
    clusters: list[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.points)


def _surface_points(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    z0, z1 = -spec.overhang, spec.length + spec.overhang
    L = z1 - z0
    hw, hh = spec.width / 2, spec.height / 2
    out = []
    for area, make in (
        (L * spec.height, lambda n: np.column_stack([np.full(n, -hw), rng.uniform(-hh, hh, n), rng.uniform(z0, z1, n)])),
        (L * spec.height, lambda n: np.column_stack([np.full(n, hw), rng.uniform(-hh, hh, n), rng.uniform(z0, z1, n)])),
        (L * spec.width, lambda n: np.column_stack([rng.uniform(-hw, hw, n), np.full(n, hh), rng.uniform(z0, z1, n)])),
        (L * spec.width, lambda n: np.column_stack([rng.uniform(-hw, hw, n), np.full(n, -hh), rng.uniform(z0, z1, n)])),
    ):
        out.append(make(rng.poisson(spec.density * area)))
    return np.concatenate(out)


def generate_scene(spec: SceneSpec | None = None, seed: int = 0) -> SyntheticScene:
    """Corridor point cloud with base descriptors and per-point visibility bands."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng([seed, 1])
    pts = _surface_points(spec, rng)
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0], pts[:, 2]))]
    n = len(pts)
    desc = random_descriptors(n, rng, spec.descriptor_dim, spec.sparsity)
    clusters = []
    n_amb = int(round(spec.ambiguity_fraction * n))
    if n_amb >= 2:
        members = rng.permutation(n)[:n_amb]
        k = max(2, spec.cluster_size)
        for start in range(0, n_amb - 1, k):
            group = np.sort(members[start:start + k])
            if len(group) < 2:
                continue
            desc[group] = desc[group[0]]
            clusters.append(group)
    short = rng.random(n) < spec.short_fraction
    span = np.where(short, rng.uniform(*spec.short_span, n), rng.uniform(*spec.long_span, n))
    r_far = rng.uniform(*spec.far_range, n)
    r_near = np.maximum(r_far - span, 0.5)
    return SyntheticScene(spec, seed, pts, desc, r_near, r_far, clusters)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class TrajectorySpec:
    length: float = 100.0
    speed: float = 1.4             # m/s
    frame_rate: float = 30.0       # Hz
    lateral_offset: float = 0.0
    wiggle_amplitude: float = 0.25
    wiggle_period: float = 17.0
    wiggle_phase: float = 0.0
    height: float = 0.0
    angular_noise_deg: float = 2.0
    noise_phase: float = 0.0
    waypoint_spacing: float = 0.5

    def __post_init__(self):
        if not self.speed > 0 or not self.frame_rate > 0:
            raise ValueError("speed and frame_rate must be positive")


class Trajectory:
    """Constant-pace walk along a polyline of waypoints, looking along the path."""

    def __init__(self, spec: TrajectorySpec | None = None):
        self.spec = spec = spec or TrajectorySpec()
        z = np.arange(0.0, spec.length + 1e-9, spec.waypoint_spacing)
        x = spec.lateral_offset + spec.wiggle_amplitude * np.sin(2 * np.pi * z / spec.wiggle_period + spec.wiggle_phase)
        y = np.full_like(z, spec.height)
        self.waypoints = np.column_stack([x, y, z])
        seg = np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)
        self.arc = np.concatenate([[0.0], np.cumsum(seg)])
        self.total_length = float(self.arc[-1])
        self.duration = self.total_length / spec.speed
        self.frame_count = int(math.floor(self.duration * spec.frame_rate)) + 1

    def position_at_arc(self, s) -> np.ndarray:
        s = np.clip(np.asarray(s, dtype=float), 0.0, self.total_length)
        return np.column_stack([np.interp(s, self.arc, self.waypoints[:, i]) for i in range(3)])

    def timestamp(self, frame_id: int) -> float:
        return frame_id / self.spec.frame_rate

    def pose_at(self, t: float) -> Pose:
        sp = self.spec
        s = sp.speed * t
        c = self.position_at_arc(s)[0]
        ahead = self.position_at_arc(s + 1.0)[0] - self.position_at_arc(s - 1.0)[0]
        yaw_path = math.atan2(ahead[0], ahead[2])
        a = math.radians(sp.angular_noise_deg)
        ph = sp.noise_phase
        # bounded smooth head motion: heading about world y, tilt about x, roll about z
        heading = yaw_path + a * math.sin(0.9 * t + ph) * 0.7 + a * 0.3 * math.sin(2.3 * t + 1.3 * ph)
        tilt = 0.5 * a * math.sin(1.7 * t + 0.5 + ph)
        roll = 0.3 * a * math.sin(1.1 * t + 2.0 + ph)
        # camera-to-world rotation in the corridor frame (x right, y down, z forward)
        R_wc = _rot_y(heading) @ _rot_x(tilt) @ _rot_z(roll)
        return Pose.from_center(c, R_wc)

    def frames(self, intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS, step: int = 1,
               count: int | None = None) -> list[SyntheticFrame]:
        n = self.frame_count if count is None else min(count, self.frame_count)
        return [SyntheticFrame(i, self.timestamp(i), self.pose_at(self.timestamp(i)), intrinsics)
                for i in range(0, n, step)]

    def marks(self, spacing: float = MARK_SPACING_M) -> list[tuple[float, np.ndarray]]:
        """``(timestamp, position)`` of marks every ``spacing`` metres of arc length."""
        n = int(math.floor(self.total_length / spacing + 1e-12))
        s = np.arange(n + 1) * spacing
        pos = self.position_at_arc(s)
        return [(float(si / self.spec.speed), p) for si, p in zip(s, pos)]


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


# ---------------------------------------------------------------------------
# rendering


@dataclass
class RenderConfig:
    keypoint_noise: float = 0.5
    descriptor_noise: float = 0.05
    clutter_fraction: float = 0.1
    dropout: float = 0.0
    seed: int = 0

    def extractor(self, scene: SyntheticScene) -> SyntheticExtractor:
        return SyntheticExtractor(scene, self.keypoint_noise, self.descriptor_noise,
                                  self.clutter_fraction, self.dropout, self.seed)


def ground_truth(trajectory: Trajectory, frames: list[SyntheticFrame]) -> GroundTruth:
    return GroundTruth({f.frame_id: f.timestamp for f in frames}, {f.frame_id: f.pose for f in frames},
                       trajectory.marks())


def render_survey(scene: SyntheticScene, trajectory: Trajectory, render: RenderConfig | None = None,
                  intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS, step: int = 1
                  ) -> tuple[list[SurveyFrame], GroundTruth]:
    """Survey frames (keypoints + descriptors) and the hidden truth.

    ``step`` renders only every step-th frame id; the pair scheduler never
    touches the others, so survey builds pass the scheduler stride here.
    """
    render = render or RenderConfig()
    ex = render.extractor(scene)
    frames = trajectory.frames(intrinsics, step=step)
    survey = []
    for f in frames:
        det = ex.extract(f)
        survey.append(SurveyFrame(f.frame_id, f.timestamp, det.uv, det.descriptors, det.response))
    return survey, ground_truth(trajectory, frames)

