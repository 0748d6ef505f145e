import numpy as np
import pytest

from vloc.geometry import CameraIntrinsics, Pose, so3_exp
from vloc.harness.scene import (DEFAULT_INTRINSICS, RenderConfig, SceneSpec, Trajectory, TrajectorySpec,
                                generate_scene, render_survey)
from vloc.mapbuild.align import align_model
from vloc.mapbuild.pairs import schedule_pairs
from vloc.mapbuild.sfm import reconstruct

INTR = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def random_pose(rng, max_angle=0.5, max_t=1.0):
    w = rng.normal(size=3)
    w *= rng.uniform(0, max_angle) / np.linalg.norm(w)
    return Pose.from_rt(so3_exp(w), rng.uniform(-max_t, max_t, 3))


def points_in_view(rng, pose, intr, n, depth=(2.0, 8.0)):
    """World points projecting at uniform pixels of ``pose``; returns (points, exact uv)."""
    uv = np.column_stack([rng.uniform(0, intr.width, n), rng.uniform(0, intr.height, n)])
    d = rng.uniform(*depth, n)
    cam = np.column_stack([intr.normalize(uv) * d[:, None], d])
    return (cam - pose.t) @ pose.R, uv


@pytest.fixture(scope="session")
def small_world():
    """A 30 m corridor, its survey, the raw model and the truth-aligned model."""
    scene = generate_scene(SceneSpec(length=30.0), seed=3)
    traj = Trajectory(TrajectorySpec(length=30.0))
    frames, truth = render_survey(scene, traj, RenderConfig(seed=3), step=10)
    model = reconstruct(frames, schedule_pairs(traj.frame_count), DEFAULT_INTRINSICS)
    ids = sorted(model.frame_poses)
    aligned, resid = align_model(model, np.array([model.frame_poses[i].center for i in ids]), truth.positions(ids))
    return {"scene": scene, "trajectory": traj, "frames": frames, "truth": truth, "model": model,
            "aligned": aligned, "residuals": resid}


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
