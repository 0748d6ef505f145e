"""Seeded experiment drivers: corridor benchmarks, compression sweep, tracking decay, throughput.

Every experiment is a pure function of ``(config, seed)``.  The only
non-reproducible outputs are wall-clock timings, kept in ``timing.csv``.
"""
from __future__ import annotations

import csv
import dataclasses
import math
import time
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..geometry import CameraIntrinsics
from ..localizer.kalman import KalmanConfig, PoseMeasurement, kalman_init, kalman_predict, kalman_update, measurement_noise
from ..localizer.ransac import RansacConfig
from ..localizer.stream import StreamConfig, StreamResult, localize_stream, read_pose_csv, write_pose_csv
from ..mapbuild.align import align_model
from ..mapbuild.compress import compress_descriptors, compress_points
from ..mapbuild.io import serialize_model
from ..mapbuild.model import Model3D
from ..mapbuild.pairs import schedule_pairs
from ..mapbuild.sfm import SfmConfig, reconstruct
from ..parallel import worker_count
from ..tracker.synthetic import SyntheticTracker
from . import plots
from .evaluate import ErrorReport, evaluate_rows, write_cdf_csv, write_summary_csv
from .scene import (DEFAULT_INTRINSICS, RenderConfig, SceneSpec, SyntheticScene, Trajectory, TrajectorySpec,
                    generate_scene, ground_truth, render_survey)
from .truth import GroundTruth

EXPERIMENTS = ("benchmark_same_day", "benchmark_diff_day", "compression_sweep", "tracking_decay", "throughput")
SWEEP_VARIANTS = ("uncompressed", "min_frames_5", "min_frames_10", "min_frames_10_mean")


@dataclass
class BenchmarkConfig:
    corridor_length: float = 100.0
    density: float = 5.0
    ambiguity_fraction: float = 0.0
    # survey: offline, full-resolution camera (scale x the query camera)
    survey_scale: int = 4
    survey_keypoint_noise: float = 0.5
    survey_descriptor_noise: float = 0.05
    window: int = 300
    stride: int = 10
    budget: int = 500
    ratio: float = 0.7
    # query stream
    keypoint_noise: float = 0.5
    descriptor_noise: float = 0.065
    clutter_fraction: float = 0.1
    diff_day_noise_factor: float = 2.0
    diff_day_dropout: float = 0.2
    lateral_offset: float = 0.3
    tracker_loss: float = 0.01
    tracker_drift_px: float = 0.2
    frame_count: int | None = None
    top_k: int = 100
    gate_px: float = 10.0
    ransac_px: float = 8.0
    match_latency: int = 15
    threads: int | None = None
    compression_min_frames: tuple[int, ...] = (5, 10)

    def validate(self) -> "BenchmarkConfig":
        positive = ("corridor_length", "density", "survey_scale", "window", "stride", "budget", "top_k",
                    "gate_px", "ransac_px", "diff_day_noise_factor")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("survey_keypoint_noise", "survey_descriptor_noise", "keypoint_noise", "descriptor_noise", "tracker_drift_px"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("ambiguity_fraction", "clutter_fraction", "diff_day_dropout", "tracker_loss"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in [0, 1)")
        if not 0 < self.ratio <= 1:
            raise ConfigError("ratio must be in (0, 1]")
        if self.stride >= self.window:
            raise ConfigError("stride must be smaller than window")
        if self.top_k < 12:
            raise ConfigError("top_k must be at least the RANSAC minimum inlier count (12)")
        if self.frame_count is not None and self.frame_count < 2:
            raise ConfigError("frame_count must be at least 2")
        if self.match_latency < 1:
            raise ConfigError("match_latency must be at least 1 frame")
        return self

    @classmethod
    def from_dict(cls, values: dict) -> "BenchmarkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        v = dict(values)
        if "compression_min_frames" in v:
            v["compression_min_frames"] = tuple(v["compression_min_frames"])
        return cls(**v).validate()

    def ransac(self) -> RansacConfig:
        return RansacConfig(inlier_threshold=self.ransac_px, top_k=self.top_k, projection_gate=self.gate_px)

    def stream(self, seed: int, replenish: bool = True) -> StreamConfig:
        threads = worker_count() if self.threads is None else self.threads
        return StreamConfig(ransac=self.ransac(), match_latency=self.match_latency, replenish=replenish,
                            threads=threads, seed=seed)


@dataclass
class Benchmark:
    """A built and aligned corridor model plus everything needed to render query streams."""
    config: BenchmarkConfig
    seed: int
    scene: SyntheticScene
    model: Model3D
    survey_truth: GroundTruth
    alignment_residuals: np.ndarray
    build_seconds: float


@dataclass
class ExperimentResult:
    name: str
    seed: int
    metrics: dict
    artifacts: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    streams: dict = field(default_factory=dict)


def survey_intrinsics(scale: int) -> CameraIntrinsics:
    d = DEFAULT_INTRINSICS
    return CameraIntrinsics(d.fx * scale, d.fy * scale, d.cx * scale, d.cy * scale, d.width * scale,
                            d.height * scale)


def build_benchmark(config: BenchmarkConfig | None = None, seed: int = 0) -> Benchmark:
    """Generate the corridor, render the survey, reconstruct and align the model."""
    cfg = (config or BenchmarkConfig()).validate()
    t0 = time.perf_counter()
    scene = generate_scene(SceneSpec(length=cfg.corridor_length, density=cfg.density,
                                      ambiguity_fraction=cfg.ambiguity_fraction), seed)
    traj = Trajectory(TrajectorySpec(length=cfg.corridor_length, noise_phase=0.37 * seed))
    render = RenderConfig(cfg.survey_keypoint_noise, cfg.survey_descriptor_noise, cfg.clutter_fraction, 0.0, 2 * seed)
    intr = survey_intrinsics(cfg.survey_scale)
    frames, truth = render_survey(scene, traj, render, intr, step=cfg.stride)
    pairs = schedule_pairs(traj.frame_count, cfg.window, cfg.stride, cfg.budget)
    model = reconstruct(frames, pairs, intr, SfmConfig(ratio_threshold=cfg.ratio, seed=seed))
    # survey-time position tags for every registered frame serve as control points
    ids = sorted(model.frame_poses)
    model, resid = align_model(model, np.array([model.frame_poses[i].center for i in ids]), truth.positions(ids))
    return Benchmark(cfg, seed, scene, model, truth, resid, time.perf_counter() - t0)


def query_stream(bench: Benchmark, diff_day: bool = False):
    """``(frames, extractor, tracker, truth)`` for a localization walk through the benchmark corridor."""
    cfg, seed = bench.config, bench.seed
    traj = Trajectory(TrajectorySpec(length=cfg.corridor_length, lateral_offset=cfg.lateral_offset,
                                     wiggle_phase=1.0 + seed, noise_phase=2.0 + seed))
    frames = traj.frames(DEFAULT_INTRINSICS, count=cfg.frame_count)
    # illumination proxy: scaled descriptor noise plus detection dropout
    sigma = cfg.descriptor_noise * (cfg.diff_day_noise_factor if diff_day else 1.0)
    dropout = cfg.diff_day_dropout if diff_day else 0.0
    extractor = RenderConfig(cfg.keypoint_noise, sigma, cfg.clutter_fraction, dropout, 2 * seed + 1).extractor(bench.scene)
    tracker = SyntheticTracker(cfg.tracker_loss, cfg.tracker_drift_px, seed + 1)
    return frames, extractor, tracker, ground_truth(traj, frames)


def run_stream(bench: Benchmark, model: Model3D | None = None, diff_day: bool = False, replenish: bool = True
               ) -> tuple[StreamResult, GroundTruth]:
    frames, extractor, tracker, truth = query_stream(bench, diff_day)
    res = localize_stream(model or bench.model, frames, extractor, tracker, bench.config.stream(bench.seed, replenish))
    return res, truth


def _rows(result: StreamResult, tmp: Path):
    write_pose_csv(result.records, tmp)
    return read_pose_csv(tmp)


def stream_report(result: StreamResult, truth: GroundTruth, mode: str = "continuous",
                  column: str | None = None) -> ErrorReport:
    with tempfile.TemporaryDirectory() as d:
        rows = _rows(result, Path(d) / "poses.csv")
    return evaluate_rows(rows, truth, mode, column)


def tail_fraction(report: ErrorReport, factor: float = 10.0) -> float:
    return report.fraction_above(factor * report.median)


def _write_timing(path: Path, items: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "seconds"])
        for k, v in items.items():
            w.writerow([k, f"{v:.6f}"])


def _stream_metrics(result: StreamResult, report: ErrorReport) -> dict:
    recs = result.records
    return {
        "frames": len(recs),
        "median_m": report.median,
        "p90_m": report.percentile(90),
        "p95_m": report.percentile(95),
        "max_m": report.max,
        "fraction_above_3m": report.fraction_above(3.0),
        "fraction_above_10x_median": tail_fraction(report),
        "missing": report.missing,
        "ransac_failures": sum(r.raw is None for r in recs),
        "mean_track_count": float(np.mean([r.track_count for r in recs])) if recs else 0.0,
        "throughput_poses_per_s": result.throughput,
        "elapsed_s": result.elapsed,
    }


def _benchmark(bench: Benchmark, diff_day: bool, out: Path | None, label: str) -> ExperimentResult:
    res, truth = run_stream(bench, diff_day=diff_day)
    name = "benchmark_diff_day" if diff_day else "benchmark_same_day"
    artifacts = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        serialize_model(bench.model, out / "model.vmap")
        write_pose_csv(res.records, out / "poses.csv")
        truth.write_csv(out / "truth.csv")
        rows = read_pose_csv(out / "poses.csv")
    else:
        with tempfile.TemporaryDirectory() as d:
            rows = _rows(res, Path(d) / "poses.csv")
    cont = evaluate_rows(rows, truth, "continuous")
    inter = evaluate_rows(rows, truth, "intermittent")
    raw = evaluate_rows(rows, truth, "continuous", "raw")
    metrics = _stream_metrics(res, cont)
    metrics.update({"intermittent_median_m": inter.median, "raw_median_m": raw.median,
                    "build_s": bench.build_seconds, "model_points": len(bench.model.points),
                    "alignment_residual_median_m": float(np.median(bench.alignment_residuals))})
    if out is not None:
        write_cdf_csv(cont, out / "report.csv")
        write_cdf_csv(inter, out / "report_intermittent.csv")
        write_summary_csv({k: v for k, v in metrics.items() if k not in _TIMING_KEYS} | cont.summary(),
                          out / "summary.csv")
        _write_timing(out / "timing.csv", {"build": bench.build_seconds, "localize": res.elapsed,
                                           **res.stage_seconds})
        plots.plot_error_cdfs({f"{label} (filtered)": cont.errors, f"{label} (raw)": raw.errors,
                               f"{label} (marks)": inter.errors}, out / "error_cdf.png", name)
        est = np.array([r.filtered.position for r in res.records if r.filtered is not None])
        plots.plot_trajectories(truth.positions(truth.frame_ids), {"filtered": est}, out / "trajectory.png")
        artifacts = {k: out / k for k in ("model.vmap", "poses.csv", "truth.csv", "report.csv",
                                          "report_intermittent.csv", "summary.csv", "timing.csv",
                                          "error_cdf.png", "trajectory.png")}
    return ExperimentResult(name, bench.seed, metrics, artifacts, {"continuous": cont, "intermittent": inter,
                                                                  "raw": raw}, {"stream": res})


_TIMING_KEYS = {"throughput_poses_per_s", "elapsed_s", "build_s"}


def benchmark_same_day(bench: Benchmark, out: Path | None = None) -> ExperimentResult:
    return _benchmark(bench, False, out, "same day")


def benchmark_diff_day(bench: Benchmark, out: Path | None = None) -> ExperimentResult:
    return _benchmark(bench, True, out, "different day")


def compressed_variants(model: Model3D, min_frames=(5, 10)) -> dict[str, Model3D]:
    """The four sweep models: uncompressed, each point threshold, and the largest threshold with mean descriptors."""
    out = {"uncompressed": model}
    for m in min_frames:
        out[f"min_frames_{m}"] = compress_points(model, m)
    top = max(min_frames)
    out[f"min_frames_{top}_mean"] = compress_descriptors(out[f"min_frames_{top}"])
    return out


def compression_sweep(bench: Benchmark, out: Path | None = None) -> ExperimentResult:
    from ..mapbuild.io import model_size
    variants = compressed_variants(bench.model, bench.config.compression_min_frames)
    metrics, reports, streams = {}, {}, {}
    rows_out = []
    for label, m in variants.items():
        res, truth = run_stream(bench, model=m)
        rep = stream_report(res, truth)
        reports[label], streams[label] = rep, res
        size = model_size(m)
        metrics[label] = {"points": len(m.points), "descriptors": m.descriptor_count, "size_bytes": size,
                          "median_m": rep.median, "p90_m": rep.percentile(90), "max_m": rep.max}
        rows_out.append([label, len(m.points), m.descriptor_count, size, repr(rep.median),
                         repr(rep.percentile(90)), repr(rep.max)])
    base = metrics["uncompressed"]
    for label, v in metrics.items():
        v["size_ratio"] = base["size_bytes"] / v["size_bytes"]
        v["median_change"] = v["median_m"] / base["median_m"] - 1.0
    artifacts = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "points", "descriptors", "size_bytes", "median_m", "p90_m", "max_m"])
            w.writerows(rows_out)
        for label, rep in reports.items():
            write_cdf_csv(rep, out / f"report_{label}.csv")
            serialize_model(variants[label], out / f"model_{label}.vmap")
        plots.plot_error_cdfs({k: r.errors for k, r in reports.items()}, out / "error_cdf.png",
                              "Compression sweep")
        artifacts = {"sweep.csv": out / "sweep.csv", "error_cdf.png": out / "error_cdf.png"}
    return ExperimentResult("compression_sweep", bench.seed, metrics, artifacts, reports, streams)


def _first_below(counts: np.ndarray, start: int, threshold: int) -> int | None:
    below = np.flatnonzero(counts[start:] < threshold)
    return None if not len(below) else int(below[0])


def tracking_decay(bench: Benchmark, out: Path | None = None) -> ExperimentResult:
    """Tracked-set size with and without replenishment.

    ``collapse_frames``: frames from the first insertion until the count drops
    below the RANSAC minimum with replenishment off.  ``sustained_frames``: how
    long it stays at or above that minimum with replenishment on.
    """
    min_inl = bench.config.ransac().min_inliers
    counts, metrics, streams = {}, {}, {}
    for label, rep in (("replenish_off", False), ("replenish_on", True)):
        res, _ = run_stream(bench, replenish=rep)
        c = np.array([r.track_count for r in res.records])
        counts[label], streams[label] = c, res
        filled = np.flatnonzero(c > 0)
        start = int(filled[0]) if len(filled) else len(c)
        drop = _first_below(c, start, min_inl) if start < len(c) else 0
        metrics[label] = {"first_fill_frame": start, "peak": int(c.max()) if len(c) else 0,
                          "frames_at_or_above_min": (len(c) - start) if drop is None else drop,
                          "collapsed": drop is not None}
    metrics["collapse_frames"] = metrics["replenish_off"]["frames_at_or_above_min"]
    metrics["sustained_frames"] = metrics["replenish_on"]["frames_at_or_above_min"]
    metrics["min_inliers"] = min_inl
    artifacts = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ids = np.array([r.frame_id for r in streams["replenish_on"].records])
        with open(out / "decay.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_id", "replenish_off", "replenish_on"])
            for i, a, b in zip(ids, counts["replenish_off"], counts["replenish_on"]):
                w.writerow([int(i), int(a), int(b)])
        plots.plot_track_counts(ids, {"replenishment off": counts["replenish_off"],
                                      "replenishment on": counts["replenish_on"]}, min_inl, out / "decay.png")
        artifacts = {"decay.csv": out / "decay.csv", "decay.png": out / "decay.png"}
    return ExperimentResult("tracking_decay", bench.seed, metrics, artifacts, {}, streams)


def throughput(bench: Benchmark, out: Path | None = None) -> ExperimentResult:
    res, _ = run_stream(bench)
    threads = bench.config.stream(bench.seed).threads
    n = len(res.records)
    metrics = {"threads": threads, "frames": n, "poses_per_s": res.throughput, "elapsed_s": res.elapsed,
               **{f"{k}_ms_per_frame": 1000.0 * v / max(n, 1) for k, v in res.stage_seconds.items()}}
    artifacts = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_timing(out / "timing.csv", {"total": res.elapsed, **res.stage_seconds})
        plots.plot_stage_times(res.stage_seconds, n, out / "timing.png")
        artifacts = {"timing.csv": out / "timing.csv", "timing.png": out / "timing.png"}
    return ExperimentResult("throughput", bench.seed, metrics, artifacts, {}, {"stream": res})


_RUNNERS = {"benchmark_same_day": benchmark_same_day, "benchmark_diff_day": benchmark_diff_day,
            "compression_sweep": compression_sweep, "tracking_decay": tracking_decay, "throughput": throughput}


def run_experiment(name: str, config: BenchmarkConfig | dict | None = None, seed: int = 0, out_dir=None,
                   bench: Benchmark | None = None) -> ExperimentResult:
    """Run a named experiment; ``bench`` reuses an already built model with the same config and seed."""
    if name not in _RUNNERS:
        raise ConfigError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if isinstance(config, dict):
        config = BenchmarkConfig.from_dict(config)
    config = (config or BenchmarkConfig()).validate()
    if bench is None or bench.config != config or bench.seed != seed:
        bench = build_benchmark(config, int(seed))
    out = Path(out_dir) if out_dir is not None else None
    return _RUNNERS[name](bench, out)


# ---------------------------------------------------------------------------
# offline filter study


def kalman_outlier_study(result: StreamResult, truth: GroundTruth, fraction: float = 0.05, sigmas: float = 10.0,
                         seed: int = 0, config: KalmanConfig | None = None) -> dict:
    """Re-filter a stream's raw measurements after corrupting a fraction of them.

    Each corrupted measurement has its position displaced by ``sigmas`` times
    the innovation standard deviation the filter would predict for it, in a
    random direction.  Returns RMS errors of the raw and filtered tracks and
    whether every corruption was rejected with the state left untouched.
    """
    cfg = config or KalmanConfig()
    rng = np.random.default_rng([seed, 404])
    meas = [(r.timestamp, r.raw) for r in result.records if r.raw is not None]
    bad = set(rng.choice(np.arange(1, len(meas)), size=max(1, int(round(fraction * len(meas)))), replace=False).tolist())
    kf = None
    raw_err, kf_err, rejected, untouched = [], [], 0, True
    for i, (ts, z) in enumerate(meas):
        if kf is not None:
            kf = kalman_predict(kf, ts - kf.last_timestamp, cfg.q_pos, cfg.q_ang) if ts > kf.last_timestamp else kf
        R = measurement_noise(z.mean_error, cfg)
        if i in bad and kf is not None:
            S = kf.covariance[np.ix_([0, 1, 2], [0, 1, 2])] + R[:3, :3]
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            # push the dominant axis past `sigmas` standard deviations of its innovation
            k = int(np.argmax(np.abs(d)))
            offset = d * sigmas * math.sqrt(S[k, k]) / abs(d[k])
            z = PoseMeasurement(*(np.array([z.x, z.y, z.z]) + offset), z.roll, z.pitch, z.yaw,
                                z.frame_id, z.inlier_count, z.mean_error)
            before = (kf.state.tobytes(), kf.covariance.tobytes())
            new, ok = kalman_update(kf, z, R, cfg.gate_sigma)
            if ok:
                untouched = False
            else:
                rejected += 1
                untouched &= (new.state.tobytes(), new.covariance.tobytes()) == before
            kf = new
        elif kf is None:
            kf = kalman_init(z, ts, cfg)
        else:
            kf, _ = kalman_update(kf, z, R, cfg.gate_sigma)
        true = truth.position(z.frame_id)
        raw_err.append(np.linalg.norm(z.position - true))
        kf_err.append(np.linalg.norm(kf.position - true))
    return {"injected": len(bad), "rejected": rejected, "state_untouched": bool(untouched),
            "raw_rms_m": float(np.sqrt(np.mean(np.square(raw_err)))),
            "filtered_rms_m": float(np.sqrt(np.mean(np.square(kf_err))))}
