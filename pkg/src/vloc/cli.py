"""Command-line interface: ``vloc <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import VlocError
from .geometry import CameraIntrinsics
from .localizer.ransac import RansacConfig
from .localizer.stream import StreamConfig, localize_stream, write_pose_csv
from .mapbuild.align import align_model, read_control_points, write_control_points
from .mapbuild.compress import compress_descriptors, compress_points
from .mapbuild.io import deserialize_model, serialize_model
from .mapbuild.model import SurveyFrame
from .mapbuild.pairs import DEFAULT_BUDGET, DEFAULT_STRIDE, DEFAULT_WINDOW, schedule_pairs
from .mapbuild.sfm import SfmConfig, reconstruct
from .parallel import worker_count
from .tracker.extract import RasterExtractor, extract_frame

log = logging.getLogger("vloc")


def _read_intrinsics(path) -> CameraIntrinsics:
    return CameraIntrinsics.from_dict(json.loads(Path(path).read_text()))


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(path.stem + suffix)


def _raster_survey(directory, threads: int) -> list[SurveyFrame]:
    from concurrent.futures import ThreadPoolExecutor

    from .tracker.frames import read_frame_dir
    extractor = RasterExtractor()
    frames = read_frame_dir(directory)
    with ThreadPoolExecutor(threads) as pool:
        out = []
        for f in frames:
            det = extract_frame(f, extractor, executor=pool)
            out.append(SurveyFrame(f.frame_id, f.timestamp, det.uv, det.descriptors, det.response))
    return out


def cmd_build(args) -> int:
    from .harness.scenefile import is_scene_file, read_scene_file
    threads = worker_count()
    out = Path(args.out)
    if is_scene_file(args.frames):
        sf = read_scene_file(args.frames)
        intr = _read_intrinsics(args.intrinsics) if args.intrinsics else sf.intrinsics
        frames, truth = sf.survey(intr, step=args.stride)
        frame_count = sf.walk().frame_count
    else:
        if not args.intrinsics:
            raise VlocError("--intrinsics is required for frame directories")
        intr = _read_intrinsics(args.intrinsics)
        frames, truth = _raster_survey(args.frames, threads), None
        frame_count = max(f.frame_id for f in frames) + 1
    pairs = schedule_pairs(frame_count, args.window, args.stride, args.budget)
    model = reconstruct(frames, pairs, intr, SfmConfig(ratio_threshold=args.ratio, seed=args.seed, threads=threads))
    size = serialize_model(model, out)
    print(f"registered {len(model.frame_poses)}/{len(frames)} frames, {len(model.points)} points, "
          f"{model.descriptor_count} descriptors, {size} bytes -> {out}")
    if truth is not None:
        ids = sorted(model.frame_poses)
        cp = _sibling(out, ".control.csv")
        write_control_points(cp, [model.frame_poses[i].center for i in ids], truth.positions(ids))
        print(f"control points (survey camera positions) -> {cp}")
    return 0


def cmd_compress(args) -> int:
    model = deserialize_model(args.input)
    before = len(model.points), model.descriptor_count
    small = compress_points(model, args.min_frames)
    if args.mean_descriptors:
        small = compress_descriptors(small)
    size = serialize_model(small, args.out)
    in_size = Path(args.input).stat().st_size
    print(f"points {before[0]} -> {len(small.points)}, descriptors {before[1]} -> {small.descriptor_count}, "
          f"bytes {in_size} -> {size} ({in_size / size:.1f}x)")
    return 0


def cmd_align(args) -> int:
    model = deserialize_model(args.input)
    mxyz, wxyz = read_control_points(args.control_points)
    aligned, resid = align_model(model, mxyz, wxyz)
    serialize_model(aligned, args.out)
    a = aligned.alignment
    print(f"scale {a.scale:.6g}; residual median {np.median(resid):.4f} m, max {resid.max():.4f} m "
          f"over {len(resid)} control points -> {args.out}")
    return 0


def cmd_localize(args) -> int:
    from .harness.scenefile import is_scene_file, read_scene_file
    from .tracker.frames import read_frame_dir
    from .tracker.lk import LKTracker
    model = deserialize_model(args.model)
    out = Path(args.out)
    if is_scene_file(args.frames):
        frames, extractor, tracker, truth = read_scene_file(args.frames).query()
    else:
        frames, extractor, tracker, truth = read_frame_dir(args.frames), RasterExtractor(), LKTracker(), None
    ransac = RansacConfig(inlier_threshold=args.ransac_px, top_k=args.top_k, projection_gate=args.gate_px)
    cfg = StreamConfig(ransac=ransac, seed=args.seed, threads=worker_count(), replenish=not args.no_replenish)
    res = localize_stream(model, frames, extractor, tracker, cfg)
    write_pose_csv(res.records, out)
    n_kf = sum(r.filtered is not None for r in res.records)
    n_raw = sum(r.raw is not None for r in res.records)
    print(f"{len(res.records)} frames, {n_raw} RANSAC poses, {n_kf} filtered poses, "
          f"{res.throughput:.1f} poses/s -> {out}")
    if truth is not None:
        tp = _sibling(out, ".truth.csv")
        truth.write_csv(tp)
        print(f"truth -> {tp}")
    from .harness.plots import plot_track_counts, plot_trajectories
    est = np.array([r.filtered.position for r in res.records if r.filtered is not None]).reshape(-1, 3)
    plot_trajectories(None if truth is None else truth.positions(truth.frame_ids), {"filtered": est},
                      _sibling(out, "_trajectory.png"))
    plot_track_counts(np.array([r.frame_id for r in res.records]), {"tracked": [r.track_count for r in res.records]},
                      cfg.ransac.min_inliers, _sibling(out, "_tracks.png"))
    return 0


def cmd_eval(args) -> int:
    from .harness.evaluate import evaluate, write_cdf_csv, write_summary_csv
    from .harness.plots import plot_error_cdfs
    from .harness.truth import GroundTruth
    model = deserialize_model(args.model) if args.model else None
    report = evaluate(args.poses, GroundTruth.read_csv(args.truth), args.mode, model, args.column)
    out = Path(args.out)
    write_cdf_csv(report, out)
    summary = report.summary()
    write_summary_csv(summary, _sibling(out, "_summary.csv"))
    plot_error_cdfs({f"{report.mode} ({report.column})": report.errors}, _sibling(out, "_cdf.png"))
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))
    return 0


def cmd_experiment(args) -> int:
    from .harness.experiments import run_experiment
    config = json.loads(Path(args.config).read_text()) if args.config else None
    res = run_experiment(args.name, config, args.seed, args.out_dir)
    print(json.dumps(res.metrics, indent=2, sort_keys=True, default=float))
    for name, path in res.artifacts.items():
        print(f"  {name}: {path}")
    return 0


def cmd_scene(args) -> int:
    from .harness.scene import RenderConfig, SceneSpec, TrajectorySpec
    from .harness.scenefile import SceneFile, TrackerSpec, write_scene_file
    from .harness.experiments import BenchmarkConfig
    cfg = BenchmarkConfig()
    traj = TrajectorySpec(length=args.length)
    render = RenderConfig(seed=2 * args.seed)
    if args.kind != "survey":
        traj = TrajectorySpec(length=args.length, lateral_offset=cfg.lateral_offset, wiggle_phase=1.0 + args.seed,
                              noise_phase=2.0 + args.seed)
        diff = args.kind == "diff_day"
        factor = cfg.diff_day_noise_factor if diff else 1.0
        render = RenderConfig(cfg.keypoint_noise, cfg.descriptor_noise * factor, cfg.clutter_fraction,
                              cfg.diff_day_dropout if diff else 0.0, 2 * args.seed + 1)
    tracker = TrackerSpec(cfg.tracker_loss, cfg.tracker_drift_px, args.seed + 1)
    sf = SceneFile(args.seed, SceneSpec(length=args.length), traj, render, tracker, frame_count=args.frame_count)
    write_scene_file(sf, args.out)
    print(f"{args.kind} scene ({args.length:g} m, seed {args.seed}) -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vloc", description="Video-based localization toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="reconstruct a model from survey frames")
    b.add_argument("--frames", required=True, help="frame directory or scene .json file")
    b.add_argument("--intrinsics", help="camera intrinsics JSON (fx, fy, cx, cy, width, height)")
    b.add_argument("--out", required=True)
    b.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    b.add_argument("--stride", type=int, default=DEFAULT_STRIDE)
    b.add_argument("--ratio", type=float, default=0.7)
    b.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_build)

    c = sub.add_parser("compress", help="drop rarely observed points, optionally merge descriptors")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--min-frames", type=int, default=10)
    c.add_argument("--mean-descriptors", action="store_true")
    c.set_defaults(func=cmd_compress)

    a = sub.add_parser("align", help="fit a similarity to control points")
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--control-points", required=True, help="CSV: model_x,model_y,model_z,world_x,world_y,world_z")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_align)

    lo = sub.add_parser("localize", help="localize a frame stream against a model")
    lo.add_argument("--model", required=True)
    lo.add_argument("--frames", required=True, help="frame directory or scene .json file")
    lo.add_argument("--out", required=True)
    lo.add_argument("--top-k", type=int, default=100)
    lo.add_argument("--gate-px", type=float, default=10.0)
    lo.add_argument("--ransac-px", type=float, default=8.0)
    lo.add_argument("--seed", type=int, default=0)
    lo.add_argument("--no-replenish", action="store_true", help="match only until the first batch arrives")
    lo.set_defaults(func=cmd_localize)

    e = sub.add_parser("eval", help="position errors of a pose CSV against truth")
    e.add_argument("--poses", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--mode", choices=("continuous", "intermittent"), default="continuous")
    e.add_argument("--out", required=True)
    e.add_argument("--model", help="model the poses came from; must be aligned")
    e.add_argument("--column", choices=("kf", "raw"), help="default: kf (continuous), raw (intermittent)")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run a named, seeded experiment")
    x.add_argument("--name", required=True)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out-dir", required=True)
    x.add_argument("--config", help="JSON file of benchmark config overrides")
    x.set_defaults(func=cmd_experiment)

    s = sub.add_parser("scene", help="write a synthetic scene file")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=("survey", "same_day", "diff_day"), default="survey")
    s.add_argument("--length", type=float, default=30.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frame-count", type=int)
    s.set_defaults(func=cmd_scene)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (VlocError, OSError, ValueError) as e:
        print(f"vloc {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
