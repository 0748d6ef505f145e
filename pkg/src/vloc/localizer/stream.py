"""Online localization: per-frame tracking + RANSAC + Kalman, with background matching.

The frame-rate path is strictly serial.  Matching runs on a worker thread
against the immutable model; its result is handed to the tracking set at a
deterministic arrival frame (``match_latency`` frames after dispatch) or, with
``match_latency=None``, as soon as the worker finishes.  Either way the
dispatch/arrival schedule is recorded so the run can be replayed exactly.
"""
from __future__ import annotations

import csv
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..geometry import Pose, euler_to_matrix
from ..mapbuild.model import Model3D
from ..parallel import worker_count
from ..tracker.extract import extract_frame
from ..tracker.tracking import (FreshMatch, SamplingScheduler, TrackResults, TrackingSet,
                                maintain_tracking_set)
from .correspondences import make_correspondences
from .kalman import (KalmanConfig, KalmanState, PoseMeasurement, kalman_init, kalman_predict, kalman_update,
                     measurement_noise)
from .ransac import RansacConfig, ransac_pnp

POSE_CSV_HEADER = ["frame_id", "timestamp", "raw_x", "raw_y", "raw_z", "raw_roll", "raw_pitch", "raw_yaw",
                   "accepted", "kf_x", "kf_y", "kf_z", "kf_roll", "kf_pitch", "kf_yaw", "inliers", "n_corr",
                   "track_count"]


@dataclass
class StreamConfig:
    ransac: RansacConfig = field(default_factory=RansacConfig)
    kalman: KalmanConfig = field(default_factory=KalmanConfig)
    capacity: int = 500
    failure_limit: int = 3
    lost_after: int = 90            # consecutive RANSAC failures
    match_latency: int | None = 15  # frames from dispatch to arrival; None = when the worker finishes
    replenish: bool = True          # False: match until the first non-empty batch arrives, then track only
    grid: tuple[int, int] = (2, 4)
    ratio_threshold: float = 0.7
    knn: int = 8
    threads: int = field(default_factory=worker_count)
    seed: int = 0


@dataclass
class FrameRecord:
    frame_id: int
    timestamp: float
    raw: PoseMeasurement | None
    accepted: bool
    filtered: KalmanState | None
    inliers: int
    n_corr: int
    track_count: int
    lost: bool = False

    def filtered_pose(self) -> Pose | None:
        return None if self.filtered is None else self.filtered.pose()


@dataclass
class StreamResult:
    records: list[FrameRecord]
    schedule: list[tuple[int, int]]
    track_stats: list
    elapsed: float
    stage_seconds: dict = field(default_factory=dict)   # cumulative wall time per stage

    @property
    def throughput(self) -> float:
        """Filtered poses per second of wall time."""
        n = sum(r.filtered is not None for r in self.records)
        return n / self.elapsed if self.elapsed > 0 else math.inf


class _Matcher:
    """Extraction + model matching for one sampled frame."""

    def __init__(self, model: Model3D, extractor, tracker, config: StreamConfig, pool):
        self.model, self.extractor, self.tracker, self.config, self.pool = model, extractor, tracker, config, pool
        self.seconds = {"extract": 0.0, "match": 0.0}

    def __call__(self, frame, predicted: Pose | None) -> list[FreshMatch]:
        cfg = self.config
        t0 = time.perf_counter()
        det = extract_frame(frame, self.extractor, cfg.grid, executor=self.pool)
        t1 = time.perf_counter()
        corr = make_correspondences(det.uv, det.descriptors, self.model, predicted, cfg.ransac,
                                    cfg.ratio_threshold, cfg.knn, frame_intrinsics(frame, self.model))
        self.seconds["extract"] += t1 - t0
        self.seconds["match"] += time.perf_counter() - t1
        if not corr:
            return []
        kp = np.array([c.keypoint_index for c in corr])
        uv = det.uv[kp]
        sources = det.sources[kp] if det.sources is not None else None
        aux = self.tracker.start(frame, uv, sources)
        return [FreshMatch(c.point_id, uv[j], c.descriptor_distance, frame.frame_id, aux[j])
                for j, c in enumerate(corr)]


def localize_stream(model: Model3D, frames, extractor, tracker, config: StreamConfig | None = None,
                    scheduler: SamplingScheduler | None = None) -> StreamResult:
    """One :class:`FrameRecord` per input frame."""
    cfg = config or StreamConfig()
    scheduler = scheduler or SamplingScheduler()
    ts = TrackingSet(cfg.capacity, cfg.failure_limit)
    kf: KalmanState | None = None
    records: list[FrameRecord] = []
    failures = 0
    lost = False
    buffer: deque = deque()
    job = None   # (dispatch frame id, arrival frame id | None, future)
    start = time.perf_counter()
    pool = ThreadPoolExecutor(max(1, cfg.threads)) if cfg.threads > 1 else None
    worker = ThreadPoolExecutor(1)
    matcher = _Matcher(model, extractor, tracker, cfg, pool)
    prev = None
    seeded = False
    seconds = {"track": 0.0, "ransac": 0.0, "kalman": 0.0}

    def due(frame_id: int) -> bool:
        if job is None:
            return False
        arrival = job[1]
        return job[2].done() if arrival is None else frame_id >= arrival

    def collect(frame_id: int) -> list[FreshMatch]:
        nonlocal job, seeded
        d, arrival, fut = job
        fresh = fut.result()
        job = None
        seeded = seeded or bool(fresh)
        if arrival is None:
            scheduler.record(d, frame_id)
        return _catch_up(fresh, buffer, d, tracker)

    try:
        for frame in frames:
            fid = frame.frame_id
            buffer.append(frame)
            if kf is not None:
                dt = frame.timestamp - kf.last_timestamp
                if dt > 0:
                    kf = kalman_predict(kf, dt, cfg.kalman.q_pos, cfg.kalman.q_ang)

            t0 = time.perf_counter()
            results = None
            if prev is not None and len(ts):
                new_uv, ok, aux = tracker.step(prev, frame, ts.uv, ts.aux)
                results = TrackResults(ts.point_ids, new_uv, ok, aux)
            seconds["track"] += time.perf_counter() - t0

            fresh: list[FreshMatch] = []
            if due(fid):
                fresh += collect(fid)
            if (cfg.replenish or not seeded) and job is None and scheduler.should_dispatch(fid, False):
                predicted = kf.pose() if (kf is not None and not lost) else None
                arrival = scheduler.replay_arrival(fid)
                if arrival is None and cfg.match_latency is not None:
                    arrival = fid + cfg.match_latency
                job = (fid, arrival, worker.submit(matcher, frame, predicted))
                if arrival is not None:
                    scheduler.record(fid, arrival)
                if due(fid):
                    fresh += collect(fid)
            oldest = job[0] if job is not None else fid
            while buffer and buffer[0].frame_id < oldest:
                buffer.popleft()

            maintain_tracking_set(ts, results, fresh, fid)

            t0 = time.perf_counter()
            ids = ts.point_ids
            raw, accepted, n_inl = None, False, 0
            if len(ids) >= 4:
                res = ransac_pnp(model.position_of(ids), ts.uv, frame_intrinsics(frame, model), cfg.ransac, seed=_frame_seed(cfg.seed, fid))
                ts.record_ransac(ids, res.inliers)
                if res.success:
                    n_inl = int(res.inliers.sum())
                    raw = PoseMeasurement.from_pose(res.pose, fid, n_inl, res.mean_error)
            t1 = time.perf_counter()
            seconds["ransac"] += t1 - t0
            if raw is not None:
                failures = 0
                lost = False
                if kf is None:
                    kf = kalman_init(raw, frame.timestamp, cfg.kalman)
                    accepted = True
                else:
                    kf, accepted = kalman_update(kf, raw, measurement_noise(raw.mean_error, cfg.kalman),
                                                 cfg.kalman.gate_sigma)
            else:
                failures += 1
                if failures >= cfg.lost_after and not lost:
                    lost = True
                    kf = None
            seconds["kalman"] += time.perf_counter() - t1
            records.append(FrameRecord(fid, frame.timestamp, raw, accepted, kf, n_inl, len(ids), len(ts), lost))
            prev = frame
    finally:
        worker.shutdown(wait=True)
        if pool is not None:
            pool.shutdown(wait=True)
    seconds.update(matcher.seconds)
    return StreamResult(records, list(scheduler.schedule), list(ts.stats), time.perf_counter() - start, seconds)


def frame_intrinsics(frame, model: Model3D):
    """Query camera of ``frame`` when it carries one, else the survey camera."""
    return getattr(frame, "intrinsics", None) or model.intrinsics


def _frame_seed(seed: int, frame_id: int) -> int:
    return (seed * 1_000_003 + frame_id) % (2 ** 63)


def _catch_up(fresh: list[FreshMatch], buffer, dispatch_frame: int, tracker) -> list[FreshMatch]:
    """Track matches made on an older frame through the buffered frames up to the newest one."""
    frames = [f for f in buffer if f.frame_id >= dispatch_frame]
    if not fresh or len(frames) < 2:
        return fresh
    uv = np.array([m.uv for m in fresh], dtype=float)
    aux = np.array([m.aux for m in fresh], dtype=float).reshape(len(fresh), -1)
    alive = np.arange(len(fresh))
    for a, b in zip(frames[:-1], frames[1:]):
        uv, ok, aux = tracker.step(a, b, uv, aux)
        alive, uv, aux = alive[ok], uv[ok], aux[ok]
        if not len(alive):
            return []
    return [FreshMatch(fresh[i].point_id, uv[j], fresh[i].descriptor_distance, fresh[i].birth_frame, aux[j])
            for j, i in enumerate(alive)]


# ---------------------------------------------------------------------------
# CSV


def _fmt(v) -> str:
    return repr(float(v))


def write_pose_csv(records: list[FrameRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(POSE_CSV_HEADER)
        for r in records:
            raw = ["", "", "", "", "", ""] if r.raw is None else [_fmt(v) for v in r.raw.vector]
            if r.filtered is None:
                kfv = ["", "", "", "", "", ""]
            else:
                s = r.filtered.state
                kfv = [_fmt(s[i]) for i in (0, 1, 2, 9, 10, 11)]
            w.writerow([r.frame_id, _fmt(r.timestamp), *raw, int(r.accepted), *kfv, r.inliers, r.n_corr,
                        r.track_count])


@dataclass
class PoseRow:
    frame_id: int
    timestamp: float
    raw: np.ndarray | None      # x, y, z, roll, pitch, yaw
    accepted: bool
    kf: np.ndarray | None
    inliers: int
    n_corr: int
    track_count: int


def read_pose_csv(path) -> list[PoseRow]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            raw = None if r["raw_x"] == "" else np.array([float(r[k]) for k in POSE_CSV_HEADER[2:8]])
            kf = None if r["kf_x"] == "" else np.array([float(r[k]) for k in POSE_CSV_HEADER[9:15]])
            rows.append(PoseRow(int(r["frame_id"]), float(r["timestamp"]), raw, r["accepted"] == "1", kf,
                                int(r["inliers"]), int(r["n_corr"]), int(r["track_count"])))
    return rows


def pose_from_row(values: np.ndarray) -> Pose:
    return Pose.from_center(values[:3], euler_to_matrix(*values[3:6]))

