"""RANSAC perspective-n-point with P3P hypotheses and Gauss-Newton refinement."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import CameraIntrinsics, Pose, project_points, so3_exp
from .p3p import _bearings, p3p_solve_bearings


@dataclass
class RansacConfig:
    inlier_threshold: float = 8.0   # px
    confidence: float = 0.99
    max_iterations: int = 500
    min_inliers: int = 12
    top_k: int = 100
    projection_gate: float = 10.0   # px
    refine_iterations: int = 10

    def __post_init__(self):
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1)")
        if not self.top_k >= self.min_inliers >= 4:
            raise ValueError("need top_k >= min_inliers >= 4")
        if self.inlier_threshold <= 0 or self.max_iterations < 1:
            raise ValueError("invalid RANSAC parameters")


@dataclass
class RansacResult:
    pose: Pose | None
    inliers: np.ndarray          # bool mask over the input correspondences
    iterations: int
    mean_error: float            # mean inlier reprojection error (px)

    @property
    def success(self) -> bool:
        return self.pose is not None


def reproj_errors(R, t, intrinsics: CameraIntrinsics, X, uv) -> np.ndarray:
    proj, z = project_points(R, t, intrinsics, X)
    err = np.sqrt(((proj - uv) ** 2).sum(1))
    err[~(z > 1e-9)] = np.inf
    return err


def refine_pose(R, t, X, uv, intrinsics: CameraIntrinsics, iterations: int = 10,
                huber: float | None = 8.0) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Newton on pixel reprojection error with an optional Huber weight."""
    R = np.asarray(R, dtype=float)
    t = np.asarray(t, dtype=float)
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    fx, fy = intrinsics.fx, intrinsics.fy
    for _ in range(iterations):
        Xc = X @ R.T + t
        z = Xc[:, 2]
        ok = z > 1e-6
        if ok.sum() < 3:
            break
        Xc, zo, obs = Xc[ok], z[ok], uv[ok]
        iz = 1.0 / zo
        r = np.column_stack([fx * Xc[:, 0] * iz + intrinsics.cx, fy * Xc[:, 1] * iz + intrinsics.cy]) - obs
        Jp = np.zeros((len(Xc), 2, 3))
        Jp[:, 0, 0] = fx * iz
        Jp[:, 0, 2] = -fx * Xc[:, 0] * iz * iz
        Jp[:, 1, 1] = fy * iz
        Jp[:, 1, 2] = -fy * Xc[:, 1] * iz * iz
        # d Xc / d omega = -[Xc]x
        S = np.zeros((len(Xc), 3, 3))
        S[:, 0, 1], S[:, 0, 2] = Xc[:, 2], -Xc[:, 1]
        S[:, 1, 0], S[:, 1, 2] = -Xc[:, 2], Xc[:, 0]
        S[:, 2, 0], S[:, 2, 1] = Xc[:, 1], -Xc[:, 0]
        J = np.concatenate([Jp @ S, Jp], axis=2)  # (n, 2, 6)
        if huber is not None:
            rn = np.sqrt((r ** 2).sum(1))
            w = np.where(rn <= huber, 1.0, huber / np.maximum(rn, 1e-12))
        else:
            w = np.ones(len(r))
        H = np.einsum("n,nki,nkj->ij", w, J, J)
        g = np.einsum("n,nki,nk->i", w, J, r)
        try:
            delta = -np.linalg.solve(H + 1e-12 * np.eye(6), g)
        except np.linalg.LinAlgError:
            break
        dR = so3_exp(delta[:3])
        R = dR @ R
        t = dR @ t + delta[3:]
        if np.abs(delta).max() < 1e-12:
            break
    return R, t


def required_iterations(inlier_ratio: float, sample_size: int, confidence: float) -> float:
    if inlier_ratio <= 0:
        return math.inf
    p = inlier_ratio ** sample_size
    if p >= 1.0:
        return 1.0
    return math.log(1.0 - confidence) / math.log(1.0 - p)


def ransac_pnp(points_3d, points_2d, intrinsics: CameraIntrinsics, config: RansacConfig | None = None,
               seed: int = 0) -> RansacResult:
    """Robust pose from 2D-3D correspondences.

    Each iteration draws four correspondences: three feed P3P and the fourth
    picks among the candidate poses.
    """
    config = config or RansacConfig()
    X = np.asarray(points_3d, dtype=float).reshape(-1, 3)
    uv = np.asarray(points_2d, dtype=float).reshape(-1, 2)
    n = len(X)
    none = RansacResult(None, np.zeros(n, bool), 0, math.inf)
    if n < 4:
        return none
    rng = np.random.default_rng(seed)
    bearings = _bearings(uv, intrinsics)
    thr = config.inlier_threshold
    best_count, best_R, best_t, best_inl = 0, None, None, None
    needed = config.max_iterations
    it = 0
    while it < min(needed, config.max_iterations):
        it += 1
        s = rng.choice(n, 4, replace=False)
        cands = p3p_solve_bearings(X[s[:3]], bearings[s[:3]])
        if not cands:
            continue
        e4 = [reproj_errors(R, t, intrinsics, X[s[3:]], uv[s[3:]])[0] for R, t in cands]
        j = int(np.argmin(e4))
        if not e4[j] <= thr:
            continue
        R, t = cands[j]
        inl = reproj_errors(R, t, intrinsics, X, uv) <= thr
        c = int(inl.sum())
        if c > best_count:
            best_count, best_R, best_t, best_inl = c, R, t, inl
            needed = required_iterations(c / n, 4, config.confidence)
    if best_R is None or best_count < config.min_inliers:
        return RansacResult(None, np.zeros(n, bool) if best_inl is None else best_inl, it, math.inf)

    R, t, inl = best_R, best_t, best_inl
    for _ in range(2):
        R2, t2 = refine_pose(R, t, X[inl], uv[inl], intrinsics, config.refine_iterations, huber=thr)
        inl2 = reproj_errors(R2, t2, intrinsics, X, uv) <= thr
        if inl2.sum() < inl.sum():
            break
        R, t, same = R2, t2, np.array_equal(inl2, inl)
        inl = inl2
        if same:
            break
    err = reproj_errors(R, t, intrinsics, X[inl], uv[inl])
    return RansacResult(Pose.from_rt(R, t), inl, it, float(err.mean()))
