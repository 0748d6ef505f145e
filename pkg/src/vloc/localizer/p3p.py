"""Minimal three-point absolute pose (Grunert's resection)."""
from __future__ import annotations

import numpy as np

from ..geometry import CameraIntrinsics

_EPS = 1e-12


def _bearings(uv, intrinsics: CameraIntrinsics) -> np.ndarray:
    xy = intrinsics.normalize(np.asarray(uv, dtype=float).reshape(-1, 2))
    b = np.column_stack([xy, np.ones(len(xy))])
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def absolute_orientation(world: np.ndarray, cam: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rigid (R, t) with ``cam ~ R @ world + t`` (Kabsch, no scale)."""
    mw, mc = world.mean(0), cam.mean(0)
    H = (world - mw).T @ (cam - mc)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        D[2, 2] = -1.0
    R = Vt.T @ D @ U.T
    return R, mc - R @ mw


def _polish(coeffs: np.ndarray, x: float, iters: int = 4) -> float:
    d = np.polyder(coeffs)
    for _ in range(iters):
        f, fp = np.polyval(coeffs, x), np.polyval(d, x)
        if fp == 0:
            break
        step = f / fp
        x -= step
        if abs(step) < 1e-15 * max(1.0, abs(x)):
            break
    return x


def p3p_solve_bearings(world: np.ndarray, bearings: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Up to four ``(R, t)`` candidates from three unit bearing vectors."""
    P1, P2, P3 = np.asarray(world, dtype=float).reshape(3, 3)
    j1, j2, j3 = bearings
    a2 = float(np.dot(P2 - P3, P2 - P3))
    b2 = float(np.dot(P1 - P3, P1 - P3))
    c2 = float(np.dot(P1 - P2, P1 - P2))
    if min(a2, b2, c2) < _EPS:
        return []
    if np.linalg.norm(np.cross(P2 - P1, P3 - P1)) ** 2 < 1e-12 * max(b2, c2) ** 2:
        return []
    ca, cb, cg = float(j2 @ j3), float(j1 @ j3), float(j1 @ j2)
    if max(abs(ca), abs(cb), abs(cg)) > 1.0 - 1e-12:
        return []

    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    bmc = (b2 - c2) / b2
    bma = (b2 - a2) / b2
    A4 = (amc - 1.0) ** 2 - 4.0 * c2 / b2 * ca * ca
    A3 = 4.0 * (amc * (1.0 - amc) * cb - (1.0 - apc) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb)
    A2 = 2.0 * (amc * amc - 1.0 + 2.0 * amc * amc * cb * cb + 2.0 * bmc * ca * ca
                - 4.0 * apc * ca * cb * cg + 2.0 * bma * cg * cg)
    A1 = 4.0 * (-amc * (1.0 + amc) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - apc) * ca * cg)
    A0 = (1.0 + amc) ** 2 - 4.0 * a2 / b2 * cg * cg
    coeffs = np.array([A4, A3, A2, A1, A0])
    scale = np.abs(coeffs).max()
    if scale < _EPS:
        return []
    coeffs = coeffs / scale
    roots = np.roots(coeffs) if abs(coeffs[0]) > 1e-14 else np.roots(coeffs[1:])

    out = []
    for r in roots:
        if abs(r.imag) > 1e-6 * max(1.0, abs(r.real)):
            continue
        v = _polish(coeffs, float(r.real))
        if v <= 0:
            continue
        den = 2.0 * (cg - v * ca)
        if abs(den) < _EPS:
            continue
        u = ((-1.0 + amc) * v * v - 2.0 * amc * cb * v + 1.0 + amc) / den
        if u <= 0:
            continue
        s1sq = b2 / (1.0 + v * v - 2.0 * v * cb)
        if s1sq <= 0:
            continue
        s1 = np.sqrt(s1sq)
        s = _refine_depths(np.array([s1, u * s1, v * s1]), (ca, cb, cg), (a2, b2, c2))
        if np.any(s <= 0):
            continue
        cam = np.array([s[0] * j1, s[1] * j2, s[2] * j3])
        R, t = absolute_orientation(np.array([P1, P2, P3]), cam)
        out.append((R, t))
    return _dedupe(out)


def _refine_depths(s, cosines, sq_dists, iters: int = 3) -> np.ndarray:
    """Newton iterations on the three law-of-cosines constraints."""
    ca, cb, cg = cosines
    a2, b2, c2 = sq_dists
    for _ in range(iters):
        s1, s2, s3 = s
        f = np.array([s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca - a2,
                      s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb - b2,
                      s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg - c2])
        J = np.array([[0.0, 2 * s2 - 2 * s3 * ca, 2 * s3 - 2 * s2 * ca],
                      [2 * s1 - 2 * s3 * cb, 0.0, 2 * s3 - 2 * s1 * cb],
                      [2 * s1 - 2 * s2 * cg, 2 * s2 - 2 * s1 * cg, 0.0]])
        try:
            step = np.linalg.solve(J, f)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)) or np.abs(step).max() > 0.1 * np.abs(s).max():
            break
        s = s - step
    return s


def _dedupe(cands):
    out = []
    for R, t in cands:
        if any(np.allclose(R, R2, atol=1e-9) and np.allclose(t, t2, atol=1e-9) for R2, t2 in out):
            continue
        out.append((R, t))
    return out


def p3p_solve(points_3d, points_2d, intrinsics: CameraIntrinsics) -> list[tuple[np.ndarray, np.ndarray]]:
    """Candidate world-to-camera ``(R, t)`` poses from three 2D-3D correspondences.

    Returns an empty list for collinear world points or coincident rays.
    """
    return p3p_solve_bearings(np.asarray(points_3d, dtype=float).reshape(3, 3), _bearings(points_2d, intrinsics))
