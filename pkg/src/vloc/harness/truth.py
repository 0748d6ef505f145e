"""Ground truth: per-frame poses plus intermittent surveyed marks."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ..geometry import Pose, euler_to_matrix, matrix_to_euler

MARK_SPACING_M = 1.524  # 5 ft
TRUTH_HEADER = ["kind", "frame_id", "timestamp", "x", "y", "z", "roll", "pitch", "yaw"]


@dataclass
class Mark:
    frame_id: int        # frame closest in time to the mark
    timestamp: float     # exact time the walker passes the mark
    position: np.ndarray


class GroundTruth:
    def __init__(self, timestamps: dict[int, float], poses: dict[int, Pose], marks=()):
        self.timestamps = dict(timestamps)
        self.poses = dict(poses)
        self.marks: list[Mark] = []
        ids = np.array(sorted(self.timestamps))
        ts = np.array([self.timestamps[i] for i in ids]) if len(ids) else np.zeros(0)
        for m in marks:
            if isinstance(m, Mark):
                self.marks.append(m)
                continue
            t, p = m
            fid = int(ids[np.argmin(np.abs(ts - t))]) if len(ids) else -1
            self.marks.append(Mark(fid, float(t), np.asarray(p, dtype=float)))

    @property
    def frame_ids(self) -> list[int]:
        return sorted(self.poses)

    def position(self, frame_id: int) -> np.ndarray:
        return self.poses[frame_id].center

    def positions(self, frame_ids) -> np.ndarray:
        return np.array([self.poses[i].center for i in frame_ids])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRUTH_HEADER)
            for fid in self.frame_ids:
                p = self.poses[fid]
                roll, pitch, yaw = matrix_to_euler(p.R.T)
                w.writerow(["frame", fid, repr(self.timestamps[fid]), *map(repr, p.center.tolist()),
                            repr(roll), repr(pitch), repr(yaw)])
            for m in self.marks:
                w.writerow(["mark", m.frame_id, repr(m.timestamp), *map(repr, m.position.tolist()), "", "", ""])

    @classmethod
    def read_csv(cls, path) -> "GroundTruth":
        ts, poses, marks = {}, {}, []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                fid = int(row["frame_id"])
                pos = np.array([float(row["x"]), float(row["y"]), float(row["z"])])
                if row["kind"] == "mark":
                    marks.append(Mark(fid, float(row["timestamp"]), pos))
                else:
                    ts[fid] = float(row["timestamp"])
                    R_wc = euler_to_matrix(float(row["roll"]), float(row["pitch"]), float(row["yaw"]))
                    poses[fid] = Pose.from_center(pos, R_wc)
        return cls(ts, poses, marks)


def interpolate_marks(mark_times, mark_positions, timestamps) -> np.ndarray:
    """Continuous truth between sparse marks assuming a constant pace between them."""
    mt = np.asarray(mark_times, dtype=float)
    mp = np.asarray(mark_positions, dtype=float)
    t = np.asarray(timestamps, dtype=float)
    return np.column_stack([np.interp(t, mt, mp[:, i]) for i in range(mp.shape[1])])
