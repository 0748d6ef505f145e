"""Camera model, pose algebra, projection, triangulation and similarity alignment.

Conventions used throughout the package:

* A :class:`Pose` maps world coordinates into the camera frame,
  ``X_cam = R @ X_world + t``.  The camera looks down its +z axis,
  x to the right and y down (pinhole, no distortion).
* Euler angles are intrinsic yaw-pitch-roll: ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
* Quaternions are stored scalar-first ``(w, x, y, z)`` with ``w >= 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import CollinearPointsError, DegenerateGeometryError

MIN_DEPTH = 1e-9
DEFAULT_MIN_PARALLAX_DEG = 1.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def normalize(self, uv: np.ndarray) -> np.ndarray:
        """Pixel coordinates (N, 2) -> normalized image coordinates (N, 2)."""
        uv = np.asarray(uv, dtype=float)
        return np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy], axis=-1)

    def denormalize(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        return np.stack([xy[..., 0] * self.fx + self.cx, xy[..., 1] * self.fy + self.cy], axis=-1)

    def contains(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


# ---------------------------------------------------------------------------
# rotations


def _canonical_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0:
        raise ValueError("quaternion must be finite and non-zero")
    q = q / n
    if q[0] < 0:
        q = -q
    return q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = _canonical_quat(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    return _canonical_quat((w, x, y, z))


def euler_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    return Rotation.from_euler("ZYX", [yaw, pitch, roll]).as_matrix()


def matrix_to_euler(R) -> tuple[float, float, float]:
    """Rotation matrix -> (roll, pitch, yaw) in radians."""
    yaw, pitch, roll = Rotation.from_matrix(np.asarray(R, dtype=float)).as_euler("ZYX")
    return float(roll), float(pitch), float(yaw)


def so3_exp(w) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=float)).as_matrix()


def so3_log(R) -> np.ndarray:
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def rotation_angle(Ra, Rb) -> float:
    """Angle in radians of the relative rotation Ra^T Rb."""
    return float(np.linalg.norm(so3_log(np.asarray(Ra).T @ np.asarray(Rb))))


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ---------------------------------------------------------------------------
# poses


class Pose:
    """Rigid world-to-camera transform. Immutable."""

    __slots__ = ("_q", "_t", "_R")

    def __init__(self, quat=(1.0, 0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)):
        q = _canonical_quat(quat)
        t = np.array(translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        R = quat_to_matrix(q)
        for a in (q, t, R):
            a.flags.writeable = False
        self._q, self._t, self._R = q, t, R

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rt(cls, R, t) -> "Pose":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_euler(cls, roll: float, pitch: float, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls.from_rt(euler_to_matrix(roll, pitch, yaw), translation)

    @classmethod
    def from_center(cls, center, R_world_from_cam) -> "Pose":
        """Build a pose from a camera centre and its camera-to-world rotation."""
        Rcw = np.asarray(R_world_from_cam, dtype=float).T
        return cls.from_rt(Rcw, -Rcw @ np.asarray(center, dtype=float))

    @property
    def quat(self) -> np.ndarray:
        return self._q

    @property
    def R(self) -> np.ndarray:
        return self._R

    @property
    def t(self) -> np.ndarray:
        return self._t

    @property
    def center(self) -> np.ndarray:
        return -self._R.T @ self._t

    def euler(self) -> tuple[float, float, float]:
        """(roll, pitch, yaw) of this pose's rotation."""
        return matrix_to_euler(self._R)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose.from_rt(self._R @ other.R, self._R @ other.t + self._t)

    def inverse(self) -> "Pose":
        return Pose.from_rt(self._R.T, -self._R.T @ self._t)

    def transform(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self._R.T + self._t

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return rotation_angle(self._R, other.R) <= atol and np.allclose(self._t, other.t, rtol=0, atol=atol)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self._q, other._q) and np.array_equal(self._t, other._t)

    def __hash__(self):
        return hash((self._q.tobytes(), self._t.tobytes()))

    def __repr__(self):
        return f"Pose(quat={self._q.round(6).tolist()}, translation={self._t.round(6).tolist()})"


# ---------------------------------------------------------------------------
# projection


class Projection(NamedTuple):
    u: float
    v: float
    depth: float
    in_front: bool


def project_points(R, t, intrinsics: CameraIntrinsics, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised pinhole projection. Returns ``(uv (N,2), depth (N,))``.

    Points with depth <= MIN_DEPTH get NaN pixel coordinates.
    """
    Xc = np.asarray(points, dtype=float).reshape(-1, 3) @ np.asarray(R).T + np.asarray(t)
    z = Xc[:, 2]
    ok = z > MIN_DEPTH
    zs = np.where(ok, z, 1.0)
    uv = np.empty((len(Xc), 2))
    uv[:, 0] = intrinsics.fx * Xc[:, 0] / zs + intrinsics.cx
    uv[:, 1] = intrinsics.fy * Xc[:, 1] / zs + intrinsics.cy
    uv[~ok] = np.nan
    return uv, z


def project(pose: Pose, intrinsics: CameraIntrinsics, p) -> Projection:
    uv, z = project_points(pose.R, pose.t, intrinsics, p)
    if not z[0] > MIN_DEPTH:
        return Projection(math.nan, math.nan, float(z[0]), False)
    return Projection(float(uv[0, 0]), float(uv[0, 1]), float(z[0]), True)


def unproject(intrinsics: CameraIntrinsics, uv, depth) -> np.ndarray:
    """Pixel coordinates plus camera-frame depth -> camera-frame points."""
    xy = intrinsics.normalize(np.asarray(uv, dtype=float).reshape(-1, 2))
    d = np.asarray(depth, dtype=float).reshape(-1)
    return np.column_stack([xy[:, 0] * d, xy[:, 1] * d, d])


def reprojection_errors(R, t, intrinsics, points, uv) -> np.ndarray:
    """Pixel distance between projected points and observations; inf behind the camera."""
    proj, z = project_points(R, t, intrinsics, points)
    err = np.linalg.norm(proj - np.asarray(uv, dtype=float).reshape(-1, 2), axis=1)
    err[~(z > MIN_DEPTH)] = np.inf
    return err


# ---------------------------------------------------------------------------
# triangulation


class Triangulation(NamedTuple):
    point: np.ndarray
    parallax_deg: float
    error_a: float
    error_b: float


def _projection_jacobian(R, Xc, fx, fy):
    """d(u,v)/dX_world for camera-frame points Xc (N,3) -> (N,2,3)."""
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    iz = 1.0 / z
    J = np.zeros((len(Xc), 2, 3))
    J[:, 0, 0] = fx * iz
    J[:, 0, 2] = -fx * x * iz * iz
    J[:, 1, 1] = fy * iz
    J[:, 1, 2] = -fy * y * iz * iz
    return J @ R


def triangulate_many(Ra, ta, Rb, tb, uva, uvb, intrinsics: CameraIntrinsics,
                     refine_steps: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Batched two-view DLT plus Gauss-Newton refinement.

    Returns ``(points (N,3), parallax_deg (N,), err_a (N,), err_b (N,))``; points that
    end up behind either camera get infinite errors.
    """
    Ra, Rb = np.asarray(Ra, float), np.asarray(Rb, float)
    ta, tb = np.asarray(ta, float), np.asarray(tb, float)
    xa = intrinsics.normalize(np.asarray(uva, float).reshape(-1, 2))
    xb = intrinsics.normalize(np.asarray(uvb, float).reshape(-1, 2))
    Pa = np.hstack([Ra, ta[:, None]])
    Pb = np.hstack([Rb, tb[:, None]])
    n = len(xa)
    A = np.empty((n, 4, 4))
    A[:, 0] = xa[:, :1] * Pa[2] - Pa[0]
    A[:, 1] = xa[:, 1:] * Pa[2] - Pa[1]
    A[:, 2] = xb[:, :1] * Pb[2] - Pb[0]
    A[:, 3] = xb[:, 1:] * Pb[2] - Pb[1]
    A /= np.linalg.norm(A, axis=2, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1, :]
    w = Xh[:, 3]
    w = np.where(np.abs(w) < 1e-15, 1e-15, w)
    X = Xh[:, :3] / w[:, None]

    fx, fy = intrinsics.fx, intrinsics.fy
    obs = np.concatenate([np.asarray(uva, float).reshape(-1, 2), np.asarray(uvb, float).reshape(-1, 2)], axis=1)
    for _ in range(refine_steps):
        Xca = X @ Ra.T + ta
        Xcb = X @ Rb.T + tb
        if np.any(Xca[:, 2] <= MIN_DEPTH) or np.any(Xcb[:, 2] <= MIN_DEPTH):
            good = (Xca[:, 2] > MIN_DEPTH) & (Xcb[:, 2] > MIN_DEPTH)
        else:
            good = np.ones(n, bool)
        if not good.any():
            break
        za = np.where(good, Xca[:, 2], 1.0)
        zb = np.where(good, Xcb[:, 2], 1.0)
        pa = np.column_stack([fx * Xca[:, 0] / za + intrinsics.cx, fy * Xca[:, 1] / za + intrinsics.cy])
        pb = np.column_stack([fx * Xcb[:, 0] / zb + intrinsics.cx, fy * Xcb[:, 1] / zb + intrinsics.cy])
        r = np.concatenate([pa, pb], axis=1) - obs
        Xca[:, 2] = za
        Xcb[:, 2] = zb
        J = np.concatenate([_projection_jacobian(Ra, Xca, fx, fy), _projection_jacobian(Rb, Xcb, fx, fy)], axis=1)
        H = np.einsum("nki,nkj->nij", J, J)
        g = np.einsum("nki,nk->ni", J, r)
        det = np.linalg.det(H)
        ok = good & (np.abs(det) > 1e-12)
        if ok.any():
            delta = np.zeros_like(X)
            delta[ok] = np.linalg.solve(H[ok], -g[ok][..., None])[..., 0]
            X = X + delta

    ca = -Ra.T @ ta
    cb = -Rb.T @ tb
    ra = X - ca
    rb = X - cb
    cosang = np.einsum("ni,ni->n", ra, rb) / np.maximum(
        np.linalg.norm(ra, axis=1) * np.linalg.norm(rb, axis=1), 1e-300)
    parallax = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    ea = reprojection_errors(Ra, ta, intrinsics, X, uva)
    eb = reprojection_errors(Rb, tb, intrinsics, X, uvb)
    return X, parallax, ea, eb


def triangulate(pose_a: Pose, pose_b: Pose, kp_a, kp_b, intrinsics: CameraIntrinsics,
                min_parallax_deg: float = DEFAULT_MIN_PARALLAX_DEG) -> Triangulation:
    """Triangulate one point from two calibrated views.

    Raises DegenerateGeometryError when the rays are (nearly) parallel or the
    point lands behind either camera.
    """
    ca, cb = pose_a.center, pose_b.center
    da = pose_a.R.T @ np.append(intrinsics.normalize(np.asarray(kp_a, float).reshape(1, 2))[0], 1.0)
    db = pose_b.R.T @ np.append(intrinsics.normalize(np.asarray(kp_b, float).reshape(1, 2))[0], 1.0)
    if np.linalg.norm(ca - cb) < 1e-12 or np.linalg.norm(np.cross(da, db)) / (
            np.linalg.norm(da) * np.linalg.norm(db)) < 1e-12:
        raise DegenerateGeometryError("zero parallax between the two views")
    X, par, ea, eb = triangulate_many(pose_a.R, pose_a.t, pose_b.R, pose_b.t, kp_a, kp_b, intrinsics)
    if not (np.isfinite(ea[0]) and np.isfinite(eb[0])):
        raise DegenerateGeometryError("triangulated point lies behind a camera")
    if par[0] < min_parallax_deg:
        raise DegenerateGeometryError(f"parallax {par[0]:.3f} deg below {min_parallax_deg} deg")
    return Triangulation(X[0], float(par[0]), float(ea[0]), float(eb[0]))


# ---------------------------------------------------------------------------
# similarity alignment


class SimilarityTransform:
    """``x -> scale * R @ x + t``."""

    __slots__ = ("scale", "_q", "_t", "_R")

    def __init__(self, scale: float = 1.0, quat=(1.0, 0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)):
        if not scale > 0:
            raise ValueError("scale must be positive")
        self.scale = float(scale)
        self._q = _canonical_quat(quat)
        self._R = quat_to_matrix(self._q)
        self._t = np.array(translation, dtype=float).reshape(3)

    @classmethod
    def from_matrix(cls, scale, R, t) -> "SimilarityTransform":
        return cls(scale, matrix_to_quat(R), t)

    @property
    def quat(self):
        return self._q.copy()

    @property
    def R(self):
        return self._R.copy()

    @property
    def t(self):
        return self._t.copy()

    def apply(self, points) -> np.ndarray:
        return self.scale * (np.asarray(points, dtype=float) @ self._R.T) + self._t

    def unapply(self, points) -> np.ndarray:
        return ((np.asarray(points, dtype=float) - self._t) @ self._R) / self.scale

    def inverse(self) -> "SimilarityTransform":
        Ri = self._R.T
        return SimilarityTransform.from_matrix(1.0 / self.scale, Ri, -(Ri @ self._t) / self.scale)

    def apply_to_pose(self, pose: Pose) -> Pose:
        """Re-express a world-to-camera pose in the transformed (metric) world."""
        R = pose.R @ self._R.T
        return Pose.from_rt(R, self.scale * pose.t - R @ self._t)

    def __eq__(self, other):
        if not isinstance(other, SimilarityTransform):
            return NotImplemented
        return self.scale == other.scale and np.array_equal(self._q, other._q) and np.array_equal(self._t, other._t)

    def __repr__(self):
        return (f"SimilarityTransform(scale={self.scale:.6g}, quat={self._q.round(6).tolist()}, "
                f"translation={self._t.round(6).tolist()})")


def umeyama_align(model_points, world_points) -> tuple[SimilarityTransform, np.ndarray]:
    """Least-squares similarity mapping ``model_points`` onto ``world_points``.

    Returns the transform and the per-point residual distances.
    """
    M = np.asarray(model_points, dtype=float).reshape(-1, 3)
    W = np.asarray(world_points, dtype=float).reshape(-1, 3)
    if len(M) != len(W):
        raise ValueError("point sets must have the same length")
    if len(M) < 3:
        raise CollinearPointsError("need at least three point pairs")
    mu_m, mu_w = M.mean(0), W.mean(0)
    Mc, Wc = M - mu_m, W - mu_w
    sv = np.linalg.svd(Mc, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise CollinearPointsError("control points are collinear")
    n = len(M)
    cov = Wc.T @ Mc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_m = (Mc ** 2).sum() / n
    scale = float(np.trace(np.diag(D) @ S) / var_m)
    t = mu_w - scale * R @ mu_m
    T = SimilarityTransform.from_matrix(scale, R, t)
    residuals = np.linalg.norm(T.apply(M) - W, axis=1)
    return T, residuals
