"""Tracking-set lifecycle and the sampling scheduler for background matching."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_CAPACITY = 500
FAILURE_LIMIT = 3


@dataclass
class TrackedPoint:
    point_id: int
    uv: np.ndarray
    birth_frame: int
    descriptor_distance: float
    consecutive_failures: int = 0
    aux: np.ndarray = field(default_factory=lambda: np.zeros(0))   # tracker-private state


@dataclass
class FreshMatch:
    point_id: int
    uv: np.ndarray
    descriptor_distance: float
    birth_frame: int
    aux: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True)
class TrackStats:
    frame_id: int
    alive_prev: int
    lost: int          # removed for any reason, evictions included
    evicted: int
    inserted: int
    alive_next: int


class TrackingSet:
    def __init__(self, capacity: int = DEFAULT_CAPACITY, failure_limit: int = FAILURE_LIMIT):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.failure_limit = failure_limit
        self.alive: dict[int, TrackedPoint] = {}
        self.stats: list[TrackStats] = []

    def __len__(self):
        return len(self.alive)

    def __contains__(self, point_id):
        return point_id in self.alive

    @property
    def point_ids(self) -> np.ndarray:
        return np.fromiter(self.alive.keys(), dtype=np.int64, count=len(self.alive))

    @property
    def uv(self) -> np.ndarray:
        return np.array([p.uv for p in self.alive.values()], dtype=float).reshape(-1, 2)

    @property
    def aux(self) -> np.ndarray:
        pts = list(self.alive.values())
        return np.array([p.aux for p in pts], dtype=float).reshape(len(pts), -1)

    def record_ransac(self, point_ids, inlier_mask) -> None:
        """Reset failure counts of inliers and bump outliers."""
        for pid, ok in zip(np.asarray(point_ids).tolist(), np.asarray(inlier_mask, bool).tolist()):
            p = self.alive.get(pid)
            if p is not None:
                p.consecutive_failures = 0 if ok else p.consecutive_failures + 1

    def snapshot(self) -> list[tuple]:
        return [(p.point_id, tuple(p.uv), p.birth_frame, p.descriptor_distance, p.consecutive_failures)
                for p in self.alive.values()]


@dataclass
class TrackResults:
    """Output of one tracking step over the set, in ``TrackingSet.point_ids`` order."""
    point_ids: np.ndarray
    uv: np.ndarray
    ok: np.ndarray
    aux: np.ndarray | None = None


def maintain_tracking_set(ts: TrackingSet, track_results: TrackResults | None,
                          fresh_matches=(), frame_id: int = -1) -> TrackingSet:
    """Apply tracking results, drop lost/failed points, then insert fresh matches.

    Fresh matches are deduplicated by point id (smallest descriptor distance
    wins).  When the set is full the longest-tracked points are evicted first.
    """
    prev = len(ts)
    lost = evicted = inserted = 0
    if track_results is not None:
        for i, pid in enumerate(np.asarray(track_results.point_ids).tolist()):
            p = ts.alive.get(pid)
            if p is None:
                continue
            if not track_results.ok[i]:
                del ts.alive[pid]
                lost += 1
                continue
            p.uv = np.asarray(track_results.uv[i], dtype=float)
            if track_results.aux is not None:
                p.aux = track_results.aux[i]
    for pid in [pid for pid, p in ts.alive.items() if p.consecutive_failures >= ts.failure_limit]:
        del ts.alive[pid]
        lost += 1

    best: dict[int, FreshMatch] = {}
    for m in fresh_matches:
        cur = best.get(m.point_id)
        if cur is None or m.descriptor_distance < cur.descriptor_distance:
            best[m.point_id] = m
    for m in sorted(best.values(), key=lambda m: (m.descriptor_distance, m.point_id)):
        old = ts.alive.get(m.point_id)
        if old is not None:
            if m.descriptor_distance < old.descriptor_distance:
                old.uv, old.aux = np.asarray(m.uv, float), m.aux
                old.descriptor_distance, old.birth_frame, old.consecutive_failures = m.descriptor_distance, m.birth_frame, 0
            continue
        if len(ts.alive) >= ts.capacity:
            oldest = min(ts.alive.values(), key=lambda p: p.birth_frame)
            if oldest.birth_frame >= m.birth_frame:
                continue
            del ts.alive[oldest.point_id]
            lost += 1
            evicted += 1
        ts.alive[m.point_id] = TrackedPoint(m.point_id, np.asarray(m.uv, float), m.birth_frame,
                                            m.descriptor_distance, 0, m.aux)
        inserted += 1
    ts.stats.append(TrackStats(frame_id, prev, lost, evicted, inserted, len(ts)))
    return ts


class SamplingScheduler:
    """Dispatch a frame to background matching iff the matcher is idle.

    Every decision is recorded as ``(dispatch_frame, arrival_frame)`` so a run
    can be replayed with the identical schedule.
    """

    def __init__(self, replay: list[tuple[int, int]] | None = None):
        self.replay = None if replay is None else {int(d): int(a) for d, a in replay}
        self.schedule: list[tuple[int, int | None]] = []

    def should_dispatch(self, frame_id: int, matcher_busy: bool) -> bool:
        if self.replay is not None:
            return frame_id in self.replay
        return not matcher_busy

    def replay_arrival(self, frame_id: int) -> int | None:
        return None if self.replay is None else self.replay.get(frame_id)

    def record(self, dispatch_frame: int, arrival_frame: int) -> None:
        self.schedule.append((dispatch_frame, arrival_frame))
