"""Pyramidal Lucas-Kanade optical flow with forward-backward verification."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .frames import RasterFrame


@dataclass(frozen=True)
class LKConfig:
    levels: int = 3
    window: int = 21
    max_iterations: int = 30
    epsilon: float = 0.01       # px, convergence
    fb_threshold: float = 1.0   # px, forward-backward
    min_eigenvalue: float = 1e-4


def build_pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        blurred = ndimage.gaussian_filter(pyr[-1], 1.0, mode="nearest")
        pyr.append(blurred[::2, ::2])
    return pyr


def _sample(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(img, [y.ravel(), x.ravel()], order=1, mode="nearest").reshape(x.shape)


def _flow(prev_pyr, next_pyr, pts: np.ndarray, guess: np.ndarray, cfg: LKConfig):
    """Track ``pts`` from prev to next. Returns (new points, ok mask)."""
    n = len(pts)
    half = cfg.window // 2
    off = np.arange(-half, half + 1, dtype=float)
    ox, oy = np.meshgrid(off, off)
    ox, oy = ox.ravel(), oy.ravel()
    ok = np.ones(n, bool)
    d = guess / (2 ** (cfg.levels - 1))
    for lvl in range(cfg.levels - 1, -1, -1):
        I, J = prev_pyr[lvl], next_pyr[lvl]
        scale = 2.0 ** lvl
        p = pts / scale
        gy, gx = np.gradient(I)
        wx = p[:, :1] + ox
        wy = p[:, 1:] + oy
        Iw = _sample(I, wx, wy)
        Ix = _sample(gx, wx, wy)
        Iy = _sample(gy, wx, wy)
        gxx, gxy, gyy = (Ix * Ix).sum(1), (Ix * Iy).sum(1), (Iy * Iy).sum(1)
        det = gxx * gyy - gxy * gxy
        tr = gxx + gyy
        min_eig = 0.5 * (tr - np.sqrt(np.maximum(tr * tr - 4 * det, 0.0))) / (cfg.window ** 2)
        ok &= min_eig > cfg.min_eigenvalue
        active = ok.copy()
        for _ in range(cfg.max_iterations):
            idx = np.flatnonzero(active)
            if not len(idx):
                break
            Jw = _sample(J, wx[idx] + d[idx, :1], wy[idx] + d[idx, 1:])
            diff = Iw[idx] - Jw
            bx, by = (diff * Ix[idx]).sum(1), (diff * Iy[idx]).sum(1)
            dt = det[idx]
            step = np.column_stack([(gyy[idx] * bx - gxy[idx] * by) / dt, (gxx[idx] * by - gxy[idx] * bx) / dt])
            d[idx] += step
            active[idx] = np.hypot(step[:, 0], step[:, 1]) >= cfg.epsilon
        if lvl > 0:
            d = d * 2.0
    new = pts + d
    return new, ok & np.all(np.isfinite(new), axis=1)


def lk_track(prev: RasterFrame, nxt: RasterFrame, points, config: LKConfig | None = None,
             pyramids=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-point ``(new_uv, tracked)``; lost when the backward track misses by more than the threshold."""
    cfg = config or LKConfig()
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if prev.pixels.shape != nxt.pixels.shape:
        raise ValueError("frames must have the same dimensions")
    if not len(pts):
        return np.zeros((0, 2)), np.zeros(0, bool)
    pp, np_ = pyramids or (build_pyramid(prev.pixels, cfg.levels), build_pyramid(nxt.pixels, cfg.levels))
    fwd, ok_f = _flow(pp, np_, pts, np.zeros_like(pts), cfg)
    back, ok_b = _flow(np_, pp, fwd, pts - fwd, cfg)
    h, w = prev.pixels.shape
    inside = (fwd[:, 0] >= 0) & (fwd[:, 0] <= w - 1) & (fwd[:, 1] >= 0) & (fwd[:, 1] <= h - 1)
    fb = np.hypot(*(back - pts).T)
    ok = ok_f & ok_b & inside & (fb <= cfg.fb_threshold)
    return fwd, ok


class LKTracker:
    """Point-tracker adapter over :func:`lk_track` for raster streams."""

    def __init__(self, config: LKConfig | None = None):
        self.config = config or LKConfig()

    def start(self, frame, uv, sources=None) -> np.ndarray:
        return np.zeros((len(uv), 0))

    def step(self, prev, nxt, uv, aux):
        new, ok = lk_track(prev, nxt, uv, self.config)
        return new, ok, aux
