import math

import numpy as np
import pytest

from vloc.errors import AlignmentMissingError, ConfigError
from vloc.geometry import Pose, project_points
from vloc.harness.evaluate import ErrorReport, evaluate, evaluate_rows, nearest_rank, read_cdf_csv, write_cdf_csv
from vloc.harness.experiments import BenchmarkConfig, run_experiment
from vloc.harness.scene import (DEFAULT_INTRINSICS, RenderConfig, SceneSpec, Trajectory, TrajectorySpec,
                                generate_scene, render_survey)
from vloc.harness.scenefile import SceneFile, TrackerSpec, read_scene_file, write_scene_file
from vloc.harness.truth import MARK_SPACING_M, GroundTruth, interpolate_marks
from vloc.localizer.stream import POSE_CSV_HEADER, PoseRow
from vloc.tracker.synthetic import SyntheticFrame


def test_scene_deterministic_and_distinct():
    a, b = generate_scene(SceneSpec(length=20), 5), generate_scene(SceneSpec(length=20), 5)
    assert np.array_equal(a.points, b.points) and np.array_equal(a.descriptors, b.descriptors)
    assert not np.array_equal(a.points, generate_scene(SceneSpec(length=20), 6).points)
    d = a.descriptors[:800]
    dist = np.sqrt(np.maximum(((d[:, None] - d[None]) ** 2).sum(-1), 0))
    np.fill_diagonal(dist, np.inf)
    assert dist.min() > 10 * 0.05


def test_scene_ambiguity_clusters():
    s = generate_scene(SceneSpec(length=20, ambiguity_fraction=0.15), 2)
    members = np.concatenate(s.clusters)
    assert abs(len(members) / len(s.points) - 0.15) < 0.01
    for c in s.clusters:
        assert len(c) >= 2 and (s.descriptors[c] == s.descriptors[c[0]]).all()


def test_stationary_camera_identical_keypoints():
    scene = generate_scene(SceneSpec(length=20), 1)
    traj = Trajectory(TrajectorySpec(length=20, angular_noise_deg=0.0, wiggle_amplitude=0.0))
    f = traj.frames(count=1)[0]
    g = SyntheticFrame(1, 1 / 30, f.pose, f.intrinsics)
    ex = RenderConfig(keypoint_noise=0.0, descriptor_noise=0.0, clutter_fraction=0.0).extractor(scene)
    a, b = ex.extract(f), ex.extract(g)
    assert len(a) > 50 and np.array_equal(a.uv, b.uv) and np.array_equal(a.descriptors, b.descriptors)


def test_visibility_matches_brute_force():
    # oracle: per-point loop over frustum, depth and visibility band
    scene = generate_scene(SceneSpec(length=20), 4)
    traj = Trajectory(TrajectorySpec(length=20))
    frames, truth = render_survey(scene, traj, RenderConfig(clutter_fraction=0.0, keypoint_noise=0.0), step=60)
    K = DEFAULT_INTRINSICS
    for f in frames:
        pose = truth.poses[f.frame_id]
        n = 0
        for X, rn, rf in zip(scene.points, scene.r_near, scene.r_far):
            c = pose.R @ X + pose.t
            if c[2] <= 0.1:
                continue
            u, v = K.fx * c[0] / c[2] + K.cx, K.fy * c[1] / c[2] + K.cy
            d = np.linalg.norm(X - pose.center)
            n += (0 <= u < K.width) and (0 <= v < K.height) and rn <= d <= rf
        assert len(f.keypoints) == n


def test_points_behind_never_visible():
    scene = generate_scene(SceneSpec(length=20), 4)
    traj = Trajectory(TrajectorySpec(length=20))
    ex = RenderConfig(clutter_fraction=0.0).extractor(scene)
    f = traj.frames(count=1)[0]
    det = ex.extract(f)
    _, depth = project_points(f.pose.R, f.pose.t, f.intrinsics, scene.points[det.source_ids])
    assert (depth > 0).all()


def test_marks_evenly_spaced():
    traj = Trajectory(TrajectorySpec(length=30))
    marks = traj.marks()
    s = np.array([t for t, _ in marks]) * traj.spec.speed
    assert np.abs(np.diff(s) - MARK_SPACING_M).max() < 1e-9
    assert len(marks) == int(traj.total_length // MARK_SPACING_M) + 1


def test_interpolate_marks():
    p = interpolate_marks([0, 1], [[0, 0, 0], [2, 0, 0]], [0.25, 0.5])
    assert np.allclose(p, [[0.5, 0, 0], [1, 0, 0]])


def test_nearest_rank():
    v = [15, 20, 35, 40, 50]
    assert [nearest_rank(v, p) for p in (0, 5, 30, 40, 50, 100)] == [15, 15, 20, 20, 35, 50]
    assert nearest_rank(v, 50) == sorted(v)[math.ceil(0.5 * 5) - 1]


def truth_line(n=10):
    ts = {i: i / 30 for i in range(n)}
    poses = {i: Pose.from_center([0.0, 0.0, float(i)], np.eye(3)) for i in range(n)}
    marks = [(i / 30, np.array([0.0, 0.0, float(i)])) for i in (0, 3, 6, 9)]
    return GroundTruth(ts, poses, marks)


def rows_from(truth, offsets):
    out = []
    for fid in truth.frame_ids:
        p = np.concatenate([truth.position(fid) + offsets.get(fid, 0), [0, 0, 0]])
        out.append(PoseRow(fid, truth.timestamps[fid], p.copy(), True, p.copy(), 10, 20, 30))
    return out


def test_evaluate_perfect():
    t = truth_line()
    for mode in ("continuous", "intermittent"):
        r = evaluate_rows(rows_from(t, {}), t, mode)
        assert r.count > 0 and r.median == 0 and r.max == 0


def test_evaluate_three_four_five():
    t = truth_line()
    r = evaluate_rows(rows_from(t, {4: np.array([3.0, 4.0, 0.0])}), t, "continuous")
    assert r.max == 5.0 and r.errors[4] == 5.0 and r.median == 0.0


def test_intermittent_only_at_marks():
    t = truth_line()
    r = evaluate_rows(rows_from(t, {4: np.array([3.0, 4.0, 0.0]), 6: np.array([0, 0, 2.0])}), t, "intermittent")
    assert r.frame_ids.tolist() == [0, 3, 6, 9] and r.errors.tolist() == [0, 0, 2.0, 0]
    assert r.column == "raw"


def test_missing_estimates_counted():
    t = truth_line()
    rows = rows_from(t, {})
    rows[2].kf = None
    r = evaluate_rows(rows, t, "continuous")
    assert r.count == 9 and r.missing == 1


def write_rows(path, rows):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(POSE_CSV_HEADER)
        for r in rows:
            w.writerow([r.frame_id, repr(r.timestamp), *map(repr, r.raw.tolist()), 1, *map(repr, r.kf.tolist()),
                        r.inliers, r.n_corr, r.track_count])


def test_evaluate_csv_median_oracle(tmp_path):
    import csv
    t = truth_line(50)
    rng = np.random.default_rng(0)
    offs = {i: rng.normal(0, 0.3, 3) for i in range(50)}
    write_rows(tmp_path / "p.csv", rows_from(t, offs))
    r = evaluate(tmp_path / "p.csv", t, "continuous")
    # independent median straight from the CSV text
    e = sorted(math.dist([float(x[k]) for k in ("kf_x", "kf_y", "kf_z")], [0, 0, float(x["frame_id"])])
               for x in csv.DictReader(open(tmp_path / "p.csv")))
    assert abs(r.median - e[math.ceil(len(e) / 2) - 1]) < 1e-12


def test_cdf_monotone_and_round_trip(tmp_path):
    r = ErrorReport("continuous", "kf", np.arange(6), np.array([0.3, 0.1, 0.3, 0.2, 0.9, 0.1]))
    cdf = r.cdf()
    assert np.all(np.diff(cdf[:, 0]) > 0) and np.all(np.diff(cdf[:, 2]) > 0)
    assert cdf[-1, 1] == r.count and cdf[-1, 2] == 1.0
    first = cdf[cdf[:, 2] >= 0.5][0, 0]
    assert first == r.median
    write_cdf_csv(r, tmp_path / "c.csv")
    assert np.array_equal(read_cdf_csv(tmp_path / "c.csv"), cdf)


def test_evaluate_requires_alignment(tmp_path, small_world):
    t = truth_line()
    write_rows(tmp_path / "p.csv", rows_from(t, {}))
    with pytest.raises(AlignmentMissingError):
        evaluate(tmp_path / "p.csv", t, "continuous", model=small_world["model"])
    assert evaluate(tmp_path / "p.csv", t, "continuous", model=small_world["aligned"]).median == 0


def test_truth_csv_round_trip(tmp_path):
    traj = Trajectory(TrajectorySpec(length=10))
    frames = traj.frames(count=20)
    from vloc.harness.scene import ground_truth
    t = ground_truth(traj, frames)
    t.write_csv(tmp_path / "t.csv")
    back = GroundTruth.read_csv(tmp_path / "t.csv")
    assert back.frame_ids == t.frame_ids and len(back.marks) == len(t.marks)
    for fid in t.frame_ids:
        assert np.allclose(back.position(fid), t.position(fid), atol=1e-12)
        assert np.allclose(back.poses[fid].R, t.poses[fid].R, atol=1e-12)


def test_scene_file_round_trip(tmp_path):
    sf = SceneFile(7, SceneSpec(length=12.0), TrajectorySpec(length=12.0, lateral_offset=0.3),
                   RenderConfig(descriptor_noise=0.1, seed=4), TrackerSpec(0.02, 0.1, 9), frame_count=40)
    write_scene_file(sf, tmp_path / "s.json")
    back = read_scene_file(tmp_path / "s.json")
    assert back == sf
    frames, ex, tr, truth = back.query()
    assert len(frames) == 40 and tr.seed == 9 and ex.descriptor_noise == 0.1
    assert truth.frame_ids == list(range(40))


def test_scene_file_rejects_unknown(tmp_path):
    (tmp_path / "s.json").write_text('{"format": "vloc-scene/1", "scene": {"colour": 1}}')
    with pytest.raises(ConfigError):
        read_scene_file(tmp_path / "s.json")
    (tmp_path / "t.json").write_text('{"format": "other"}')
    with pytest.raises(ConfigError):
        read_scene_file(tmp_path / "t.json")


@pytest.mark.parametrize("bad", [{"stride": 400}, {"tracker_loss": 1.5}, {"top_k": 5}, {"no_such_key": 1},
                                 {"descriptor_noise": -1}, {"match_latency": 0}])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        BenchmarkConfig.from_dict(bad)


def test_unknown_experiment():
    with pytest.raises(ConfigError):
        run_experiment("no_such_experiment", None, 0)


def test_small_experiment_reproducible(tmp_path):
    cfg = {"corridor_length": 20.0, "frame_count": 150, "threads": 1}
    a = run_experiment("benchmark_same_day", cfg, 1, tmp_path / "a")
    b = run_experiment("benchmark_same_day", cfg, 1, tmp_path / "b")
    names = [n for n in sorted(a.artifacts) if not n.startswith("timing") and str(a.artifacts[n]).endswith(".csv")]
    assert names
    for n in names:
        assert a.artifacts[n].read_bytes() == b.artifacts[n].read_bytes(), n
    assert a.artifacts["model.vmap"].read_bytes() == b.artifacts["model.vmap"].read_bytes()
    assert a.metrics["median_m"] == b.metrics["median_m"] and a.metrics["median_m"] < 0.5
    for png in ("error_cdf.png", "trajectory.png"):
        assert a.artifacts[png].stat().st_size > 1000
