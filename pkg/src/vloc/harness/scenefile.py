"""JSON scene files: a seeded synthetic corridor plus one walk through it.

A scene file stands in for a video on the command line.  It fixes the world
(``scene`` + ``seed``), the walk (``trajectory``), the camera (``intrinsics``)
and the detector/tracker noise, so ``build`` and ``localize`` can render
frames on demand and emit the hidden truth next to their outputs.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError
from ..geometry import CameraIntrinsics
from ..tracker.synthetic import SyntheticTracker
from .scene import (DEFAULT_INTRINSICS, RenderConfig, SceneSpec, SyntheticScene, Trajectory, TrajectorySpec,
                    generate_scene, ground_truth, render_survey)

SCENE_FORMAT = "vloc-scene/1"


def _load(cls, values: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    fixed = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return cls(**fixed)


@dataclass
class TrackerSpec:
    loss_prob: float = 0.01
    drift_px: float = 0.2
    seed: int = 1


@dataclass
class SceneFile:
    seed: int = 0
    scene: SceneSpec = dataclasses.field(default_factory=SceneSpec)
    trajectory: TrajectorySpec = dataclasses.field(default_factory=TrajectorySpec)
    render: RenderConfig = dataclasses.field(default_factory=RenderConfig)
    tracker: TrackerSpec = dataclasses.field(default_factory=TrackerSpec)
    intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS
    frame_count: int | None = None

    def to_dict(self) -> dict:
        return {"format": SCENE_FORMAT, "seed": self.seed, "scene": dataclasses.asdict(self.scene),
                "trajectory": dataclasses.asdict(self.trajectory), "render": dataclasses.asdict(self.render),
                "tracker": dataclasses.asdict(self.tracker), "intrinsics": self.intrinsics.to_dict(),
                "frame_count": self.frame_count}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneFile":
        if d.get("format") != SCENE_FORMAT:
            raise ConfigError(f"not a scene file (format {d.get('format')!r}, expected {SCENE_FORMAT!r})")
        return cls(int(d.get("seed", 0)), _load(SceneSpec, d.get("scene", {})),
                   _load(TrajectorySpec, d.get("trajectory", {})), _load(RenderConfig, d.get("render", {})),
                   _load(TrackerSpec, d.get("tracker", {})),
                   CameraIntrinsics.from_dict(d["intrinsics"]) if "intrinsics" in d else DEFAULT_INTRINSICS,
                   d.get("frame_count"))

    def world(self) -> SyntheticScene:
        return generate_scene(self.scene, self.seed)

    def walk(self) -> Trajectory:
        return Trajectory(self.trajectory)

    def survey(self, intrinsics: CameraIntrinsics | None = None, step: int = 1):
        """Survey frames and truth rendered every ``step`` frames."""
        return render_survey(self.world(), self.walk(), self.render, intrinsics or self.intrinsics, step)

    def query(self, intrinsics: CameraIntrinsics | None = None):
        """``(frames, extractor, tracker, truth)`` for localization."""
        traj = self.walk()
        frames = traj.frames(intrinsics or self.intrinsics, count=self.frame_count)
        t = self.tracker
        return (frames, self.render.extractor(self.world()), SyntheticTracker(t.loss_prob, t.drift_px, t.seed),
                ground_truth(traj, frames))


def write_scene_file(scene: SceneFile, path) -> None:
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2, sort_keys=True) + "\n")


def read_scene_file(path) -> SceneFile:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return SceneFile.from_dict(d)


def is_scene_file(path) -> bool:
    p = Path(path)
    return p.is_file() and p.suffix.lower() == ".json"
